"""l2 projected-gradient attack on toy Lipschitz models.

The attack climbs the non-conformity score of a chosen class (equivalently,
descends its logit, since every supported score is strictly decreasing in
the target logit), with normalized steps, hard projection onto the
epsilon-ball after every step, and best-of-restarts selection. It is the
empirical adversary every certificate in the toolkit is validated against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conformal import CalibrationRecord, coverage_from_membership, vanilla_membership
from .lipnet import LipschitzClassifier, forward, input_gradient_batch
from .rng import substream

MAXIMIZE_TRUE_SCORE = "maximize_true_score"
MINIMIZE_TRUE_SCORE = "minimize_true_score"


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 40
    step_size: float | None = None  # defaults to epsilon / 4
    restarts: int = 3
    seed: int = 0
    objective: str = MAXIMIZE_TRUE_SCORE

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.objective not in (MAXIMIZE_TRUE_SCORE, MINIMIZE_TRUE_SCORE):
            raise ValueError(f"unknown objective {self.objective!r}")

    @property
    def effective_step(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4.0


def _project_ball(delta: np.ndarray, epsilon: float) -> np.ndarray:
    norms = np.linalg.norm(delta, axis=-1, keepdims=True)
    scale = np.minimum(1.0, epsilon / np.maximum(norms, 1e-300))
    return delta * scale


def pgd_attack_batch(
    model: LipschitzClassifier,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
) -> np.ndarray:
    """Attack a batch of inputs; returns perturbed inputs within the ball.

    Since the score is a strictly monotone decreasing function of the true
    logit, maximizing the score means minimizing logits[:, y] and vice
    versa. Zero-gradient steps keep the iterate.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y)
    if cfg.epsilon == 0.0 or cfg.steps == 0:
        return x.copy()
    sign = -1.0 if cfg.objective == MAXIMIZE_TRUE_SCORE else 1.0
    rng = substream(cfg.seed, "pgd-restarts")
    step = cfg.effective_step
    best_delta = np.zeros_like(x)
    best_logit = forward(model, x)[np.arange(x.shape[0]), y]
    for restart in range(max(1, cfg.restarts)):
        if restart == 0:
            delta = np.zeros_like(x)
        else:
            delta = _project_ball(
                rng.standard_normal(x.shape) * cfg.epsilon, cfg.epsilon
            )
        for _ in range(cfg.steps):
            grad = input_gradient_batch(model, x + delta, y)
            norms = np.linalg.norm(grad, axis=-1, keepdims=True)
            direction = np.where(norms > 0, grad / np.maximum(norms, 1e-300), 0.0)
            delta = _project_ball(delta + sign * step * direction, cfg.epsilon)
        logit = forward(model, x + delta)[np.arange(x.shape[0]), y]
        better = sign * logit > sign * best_logit
        best_delta[better] = delta[better]
        best_logit[better] = logit[better]
    return x + _project_ball(best_delta, cfg.epsilon)


def pgd_attack(
    model: LipschitzClassifier, x: np.ndarray, y: int, cfg: AttackConfig
) -> np.ndarray:
    """Attack a single input; returns x_tilde with ||x_tilde - x||_2 <= eps."""
    x = np.asarray(x, dtype=float)
    return pgd_attack_batch(model, x[None, :], np.array([y]), cfg)[0]


def coverage_under_attack(
    model: LipschitzClassifier,
    cal: CalibrationRecord,
    test_inputs: np.ndarray,
    test_labels: np.ndarray,
    cfg: AttackConfig,
) -> float:
    """Plug-in estimate of the coverage of vanilla sets at attacked points."""
    labels = np.asarray(test_labels)
    attacked = pgd_attack_batch(model, test_inputs, labels, cfg)
    membership = vanilla_membership(cal, forward(model, attacked))
    return coverage_from_membership(membership, labels)
