"""Certified coverage bands for vanilla CP under attack.

For each evaluation sample we compute two critical perturbation budgets:
the entry budget at which the true label enters the conservative set and
the exit budget past which it leaves the restrictive set. Sorting those
thresholds yields the exact empirical coverage curves (step functions of
epsilon). Inverting binomial tails at each achievable count then gives a
band that brackets the population coverage-under-attack simultaneously for
every epsilon with probability 1 - delta.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import betainc

from .conformal import CalibrationRecord
from .scores import (
    GLOBAL_LIPSCHITZ,
    LAC_SIGMOID,
    TIGHT_MONOTONE,
    sigmoid_inverse_threshold,
)

RIGHT_CONTINUOUS = "right_continuous"
LEFT_CONTINUOUS = "left_continuous"

APPENDIX_CORRECTED = "appendix_corrected"
MAIN_TEXT_RAW = "main_text_raw"

NEVER = -np.inf  # exit threshold for samples that are never set members

_BISECT_TOL = 1e-10
_BISECT_MAX_ITERS = 100


@dataclass(frozen=True)
class StepCurve:
    """Piecewise-constant function of epsilon on [0, inf).

    ``values`` has one more entry than ``breakpoints``: values[j] is taken
    between breakpoints j-1 and j. A right-continuous curve takes
    values[j+1] at breakpoint j; a left-continuous one takes values[j].
    """

    breakpoints: np.ndarray
    values: np.ndarray
    continuity: str

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if vals.size != bp.size + 1:
            raise ValueError("need exactly one more value than breakpoints")
        if bp.size and np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if self.continuity not in (RIGHT_CONTINUOUS, LEFT_CONTINUOUS):
            raise ValueError(f"unknown continuity {self.continuity!r}")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    def __call__(self, eps) -> np.ndarray:
        eps = np.asarray(eps, dtype=float)
        side = "right" if self.continuity == RIGHT_CONTINUOUS else "left"
        idx = np.searchsorted(self.breakpoints, eps, side=side)
        out = self.values[idx]
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class CriticalEpsilons:
    """Per-sample (entry, exit) budgets of the true label.

    entry[i]: smallest epsilon at which sample i joins the conservative
    set (0 if its vanilla score is already below the quantile).
    exit[i]: largest epsilon at which it is still in the restrictive set;
    -inf when it is never a member.
    """

    entry: np.ndarray
    exit: np.ndarray
    method: str

    @property
    def m(self) -> int:
        return self.entry.size


def critical_epsilons(
    cal: CalibrationRecord,
    eval_scores_true_label,
    method: str = TIGHT_MONOTONE,
) -> CriticalEpsilons:
    """Exact membership-flip budgets from the monotone score bounds.

    Works from true-label scores only: for the sigmoid score the logit is
    recovered by inverting the (strictly monotone) score map.
    """
    s = np.asarray(eval_scores_true_label, dtype=float)
    q = cal.q_alpha
    spec = cal.score_spec
    ln = cal.lipschitz_product
    if method == TIGHT_MONOTONE and spec.kind == LAC_SIGMOID:
        if not (0.0 < q < 1.0):
            warnings.warn(
                f"q_alpha={q} outside (0,1): tight inversion undefined, "
                "falling back to the global method",
                RuntimeWarning,
            )
            method = GLOBAL_LIPSCHITZ
    if method == TIGHT_MONOTONE and spec.kind == LAC_SIGMOID:
        thr = sigmoid_inverse_threshold(spec, q)
        # logit of each eval sample, from the strictly monotone score map
        logit = np.clip(s, 1e-300, 1.0 - 1e-16)
        logit = spec.bias + spec.temperature * np.log((1.0 - logit) / logit)
        entry = np.maximum(0.0, (thr - logit) / ln)
        exit_ = (logit - thr) / ln
    elif method == GLOBAL_LIPSCHITZ:
        lt = ln * spec.score_lipschitz
        entry = np.maximum(0.0, (s - q) / lt)
        exit_ = (q - s) / lt
    else:
        raise ValueError(
            f"method {method!r} not supported for score kind {spec.kind!r}"
        )
    exit_ = np.where(exit_ < 0, NEVER, exit_)
    return CriticalEpsilons(entry=entry, exit=exit_, method=method)


def coverage_curves(crit: CriticalEpsilons) -> tuple[StepCurve, StepCurve]:
    """Exact empirical curves (covmax non-decreasing, covmin non-increasing).

    covmax(eps) is the fraction of entry thresholds <= eps
    (right-continuous); covmin(eps) the fraction of exit thresholds >= eps
    (left-continuous). Both equal vanilla coverage at eps = 0.
    """
    m = crit.m
    if m < 1:
        raise ValueError("need at least one evaluation sample")
    entry = np.sort(crit.entry)
    bp_max = np.unique(entry[entry > 0])
    counts_max = np.searchsorted(entry, np.concatenate([[0.0], bp_max]), side="right")
    covmax = StepCurve(
        breakpoints=bp_max,
        values=counts_max / m,
        continuity=RIGHT_CONTINUOUS,
    )
    finite_exit = np.sort(crit.exit[np.isfinite(crit.exit)])
    # a sample is a member at eps iff its exit threshold >= eps; the curve
    # drops just AFTER each exit value (left-continuity), and 0 itself is a
    # breakpoint when some sample only covers the single point eps = 0
    bp_min = np.unique(finite_exit)
    counts_min = np.concatenate(
        [
            [finite_exit.size],
            finite_exit.size - np.searchsorted(finite_exit, bp_min, side="right"),
        ]
    )
    covmin = StepCurve(
        breakpoints=bp_min,
        values=counts_min / m,
        continuity=LEFT_CONTINUOUS,
    )
    return covmax, covmin


def binomial_cdf(m: int, p: float, k: int) -> float:
    """CDF of Binomial(m, p) at k, via the regularized incomplete beta."""
    if not (0 <= k <= m):
        raise ValueError(f"k={k} outside [0, {m}]")
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"p={p} outside [0, 1]")
    if k == m:
        return 1.0
    if p == 0.0:
        return 1.0
    if p == 1.0:
        return 0.0
    return float(betainc(m - k, k + 1, 1.0 - p))


def covmax_plus(m: int, count: int, delta: float) -> float:
    """max{p : F_{m,p}(count) >= delta}, by bisection on the monotone tail."""
    if not (0 <= count <= m):
        raise ValueError(f"count={count} outside [0, {m}]")
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta={delta} outside (0, 1)")
    if count == m:
        return 1.0
    if count == 0:
        # F_{m,p}(0) = (1 - p)^m, so the root is closed-form
        return 1.0 - delta ** (1.0 / m)
    return _covmax_plus_bisect(m, count, delta)


@lru_cache(maxsize=1 << 16)
def _covmax_plus_bisect(m: int, count: int, delta: float) -> float:
    lo, hi = 0.0, 1.0  # F(lo) = 1 >= delta, F(hi) = 0 < delta
    for _ in range(_BISECT_MAX_ITERS):
        mid = 0.5 * (lo + hi)
        if binomial_cdf(m, mid, count) >= delta:
            lo = mid
        else:
            hi = mid
        if hi - lo <= _BISECT_TOL:
            break
    return lo


def covmin_minus(m: int, miss_count: int, delta: float) -> float:
    """Lower confidence bound: 1 - covmax_plus applied to the miss count."""
    return 1.0 - covmax_plus(m, miss_count, delta)


@dataclass(frozen=True)
class CertifiedBand:
    """Simultaneous (over all epsilon) bracket of coverage under attack."""

    m: int
    delta: float
    delta_prime: float
    lower: StepCurve
    upper: StepCurve
    correction_mode: str

    def sidecar(self, extra: dict | None = None) -> str:
        doc = {
            "m": self.m,
            "delta": self.delta,
            "delta_prime": self.delta_prime,
            "correction_mode": self.correction_mode,
        }
        if extra:
            doc.update(extra)
        return json.dumps(doc, indent=2)


def certified_band(
    crit: CriticalEpsilons,
    delta: float,
    correction_mode: str = APPENDIX_CORRECTED,
) -> CertifiedBand:
    """Invert binomial tails around the empirical curves.

    The risk is split as delta' = delta / (2m - 2) across both one-sided
    bounds and the per-curve union over achievable counts. The corrected
    mode adds the +-1/m slack the uniform concentration proofs carry; the
    raw mode reproduces the uncorrected main statement for comparison.
    """
    m = crit.m
    if m < 2:
        raise ValueError("certified band needs m >= 2 evaluation samples")
    if correction_mode not in (APPENDIX_CORRECTED, MAIN_TEXT_RAW):
        raise ValueError(f"unknown correction mode {correction_mode!r}")
    delta_prime = delta / (2 * m - 2)
    covmax, covmin = coverage_curves(crit)
    slack = 1.0 / m if correction_mode == APPENDIX_CORRECTED else 0.0

    # one inversion per achievable count; curves then share the empirical
    # breakpoints
    upper_table = {}
    upper_vals = np.empty_like(covmax.values)
    for j, frac in enumerate(covmax.values):
        count = round(frac * m)
        if count not in upper_table:
            upper_table[count] = covmax_plus(m, count, delta_prime)
        upper_vals[j] = min(1.0, upper_table[count] + slack)
    lower_table = {}
    lower_vals = np.empty_like(covmin.values)
    for j, frac in enumerate(covmin.values):
        miss = round((1.0 - frac) * m)
        if miss not in lower_table:
            lower_table[miss] = covmin_minus(m, miss, delta_prime)
        lower_vals[j] = max(0.0, lower_table[miss] - slack)

    return CertifiedBand(
        m=m,
        delta=delta,
        delta_prime=delta_prime,
        lower=StepCurve(covmin.breakpoints, lower_vals, LEFT_CONTINUOUS),
        upper=StepCurve(covmax.breakpoints, upper_vals, RIGHT_CONTINUOUS),
        correction_mode=correction_mode,
    )
