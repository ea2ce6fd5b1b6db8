"""Vanilla split conformal prediction: quantile, sets, coverage."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .scores import ScoreSpec, score_all


class InvalidRiskError(ValueError):
    """alpha below 1/(n+1): the conformal quantile is undefined."""


@dataclass(frozen=True)
class CalibrationRecord:
    """Portable artifact of a calibration run.

    ``epsilon_calibrated`` is 0 for vanilla calibration and the certified
    perturbation budget for robust (shifted) calibration.
    """

    q_alpha: float
    alpha: float
    n_cal: int
    score_spec: ScoreSpec
    lipschitz_product: float
    epsilon_calibrated: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "q_alpha": self.q_alpha,
                "alpha": self.alpha,
                "n_cal": self.n_cal,
                "epsilon_calibrated": self.epsilon_calibrated,
                "lipschitz_product": self.lipschitz_product,
                "score_spec": self.score_spec.to_dict(),
            },
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "CalibrationRecord":
        doc = json.loads(text)
        return CalibrationRecord(
            q_alpha=float(doc["q_alpha"]),
            alpha=float(doc["alpha"]),
            n_cal=int(doc["n_cal"]),
            score_spec=ScoreSpec.from_dict(doc["score_spec"]),
            lipschitz_product=float(doc["lipschitz_product"]),
            epsilon_calibrated=float(doc["epsilon_calibrated"]),
        )


@dataclass(frozen=True)
class PredictionSet:
    members: frozenset[int]
    sample_id: object = None

    def __contains__(self, label: int) -> bool:
        return int(label) in self.members

    def __len__(self) -> int:
        return len(self.members)


def conformal_rank(n: int, alpha: float) -> int:
    """1-based calibration rank ceil((n + 1) (1 - alpha))."""
    if not (alpha < 1.0):
        raise InvalidRiskError(f"alpha must be < 1, got {alpha}")
    if alpha < 1.0 / (n + 1):
        raise InvalidRiskError(
            f"alpha={alpha} below 1/(n+1)={1.0 / (n + 1)}: quantile undefined"
        )
    return math.ceil((n + 1) * (1.0 - alpha))


def conformal_quantile(scores, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest calibration score."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("empty calibration scores")
    rank = conformal_rank(scores.size, alpha)
    return float(np.sort(scores)[rank - 1])


def calibrate(
    cal_scores,
    alpha: float,
    score_spec: ScoreSpec,
    lipschitz_product: float = 1.0,
) -> CalibrationRecord:
    """Vanilla calibration: wrap the conformal quantile in a record."""
    scores = np.asarray(cal_scores, dtype=float)
    return CalibrationRecord(
        q_alpha=conformal_quantile(scores, alpha),
        alpha=alpha,
        n_cal=int(scores.size),
        score_spec=score_spec,
        lipschitz_product=lipschitz_product,
        epsilon_calibrated=0.0,
    )


def vanilla_membership(cal: CalibrationRecord, logits: np.ndarray) -> np.ndarray:
    """Boolean membership matrix (n, c): score(y) <= q_alpha."""
    return score_all(cal.score_spec, np.atleast_2d(logits)) <= cal.q_alpha


def prediction_set(cal: CalibrationRecord, logits, sample_id=None) -> PredictionSet:
    """Vanilla prediction set {y : s(x, y) <= q_alpha} for one sample."""
    member = vanilla_membership(cal, logits)[0]
    return PredictionSet(frozenset(np.flatnonzero(member).tolist()), sample_id)


def empirical_coverage(sets, labels) -> float:
    """Fraction of samples whose true label is in the prediction set."""
    if len(sets) != len(labels):
        raise ValueError(
            f"{len(sets)} sets vs {len(labels)} labels: lengths must match"
        )
    hits = sum(1 for ps, y in zip(sets, labels) if int(y) in ps)
    return hits / len(sets)


def coverage_from_membership(membership: np.ndarray, labels) -> float:
    """Coverage straight from a membership matrix (fast path)."""
    labels = np.asarray(labels)
    return float(np.mean(membership[np.arange(labels.size), labels]))
