"""Certifiably robust conformal prediction with Lipschitz-bounded classifiers.

The toolkit builds robust prediction sets that keep their coverage under
l2-bounded adversarial perturbations, audits vanilla conformal prediction
under attack via binomial coverage bands valid simultaneously for all
attack budgets, and certifies calibration-set feature poisoning through
exact worst-case quantile-shift bounds.
"""

from . import attack, audit, conformal, datasets, lipnet, poison, robust, scores
from .rng import substream

__all__ = [
    "attack",
    "audit",
    "conformal",
    "datasets",
    "lipnet",
    "poison",
    "robust",
    "scores",
    "substream",
]

__version__ = "0.1.0"
