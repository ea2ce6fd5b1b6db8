"""Robust (conservative) and restrictive prediction sets, plus the unified
robust calibration that folds the certified score shift into the quantile.

The canonical path is "vanilla threshold + bounded scores": a label enters
the conservative set when its certified lower score bound is below q_alpha,
and the restrictive set when its certified upper bound is. The shifted-
quantile path (`robust_calibrate`) is equivalent for the global method by
translation equivariance of rank statistics and exists to make that
equivalence checkable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conformal import CalibrationRecord, PredictionSet, conformal_quantile
from .scores import TIGHT_MONOTONE, ScoreSpec, lower_bound_all, upper_bound_all


@dataclass(frozen=True)
class RobustSetPair:
    conservative: PredictionSet
    restrictive: PredictionSet
    epsilon: float
    method: str


def conservative_membership(
    cal: CalibrationRecord,
    logits: np.ndarray,
    epsilon: float,
    method: str = TIGHT_MONOTONE,
) -> np.ndarray:
    """Membership matrix of the conservative set: lower bound <= q_alpha."""
    lower = lower_bound_all(
        cal.score_spec, np.atleast_2d(logits), epsilon, cal.lipschitz_product, method
    )
    return lower <= cal.q_alpha


def restrictive_membership(
    cal: CalibrationRecord,
    logits: np.ndarray,
    epsilon: float,
    method: str = TIGHT_MONOTONE,
) -> np.ndarray:
    """Membership matrix of the restrictive set: upper bound <= q_alpha."""
    upper = upper_bound_all(
        cal.score_spec, np.atleast_2d(logits), epsilon, cal.lipschitz_product, method
    )
    return upper <= cal.q_alpha


def conservative_set(
    cal: CalibrationRecord,
    logits,
    epsilon: float,
    method: str = TIGHT_MONOTONE,
    sample_id=None,
) -> PredictionSet:
    member = conservative_membership(cal, logits, epsilon, method)[0]
    return PredictionSet(frozenset(np.flatnonzero(member).tolist()), sample_id)


def restrictive_set(
    cal: CalibrationRecord,
    logits,
    epsilon: float,
    method: str = TIGHT_MONOTONE,
    sample_id=None,
) -> PredictionSet:
    member = restrictive_membership(cal, logits, epsilon, method)[0]
    return PredictionSet(frozenset(np.flatnonzero(member).tolist()), sample_id)


def robust_set_pair(
    cal: CalibrationRecord,
    logits,
    epsilon: float,
    method: str = TIGHT_MONOTONE,
    sample_id=None,
) -> RobustSetPair:
    return RobustSetPair(
        conservative=conservative_set(cal, logits, epsilon, method, sample_id),
        restrictive=restrictive_set(cal, logits, epsilon, method, sample_id),
        epsilon=epsilon,
        method=method,
    )


def robust_calibrate(
    cal_scores,
    alpha: float,
    epsilon: float,
    score_spec: ScoreSpec,
    lipschitz_product: float = 1.0,
) -> CalibrationRecord:
    """Shifted calibration: quantile of scores raised by L_n * L_s * epsilon.

    Testing vanilla scores against the shifted quantile gives exactly the
    same sets as testing globally lower-bounded scores against the vanilla
    quantile.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    shift = lipschitz_product * score_spec.score_lipschitz * epsilon
    scores = np.asarray(cal_scores, dtype=float)
    return CalibrationRecord(
        q_alpha=conformal_quantile(scores + shift, alpha),
        alpha=alpha,
        n_cal=int(scores.size),
        score_spec=score_spec,
        lipschitz_product=lipschitz_product,
        epsilon_calibrated=epsilon,
    )
