"""Synthetic data generation, seeded splitting, and logits CSV ingestion."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .rng import substream

RAW_INPUTS = "raw_inputs"
PRECOMPUTED_LOGITS = "precomputed_logits"


class CsvFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    """Rows of either raw inputs (n, d) or precomputed logits (n, c)."""

    data: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    kind: str = RAW_INPUTS

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        labels = np.asarray(self.labels, dtype=int)
        ids = np.asarray(self.ids)
        if not (data.shape[0] == labels.shape[0] == ids.shape[0]):
            raise ValueError("inconsistent row counts")
        if ids.size != np.unique(ids).size:
            raise ValueError("row ids must be unique")
        if self.kind not in (RAW_INPUTS, PRECOMPUTED_LOGITS):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    def take(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            data=self.data[indices],
            labels=self.labels[indices],
            ids=self.ids[indices],
            kind=self.kind,
        )

    def metadata(self) -> str:
        return json.dumps(
            {"n": self.n, "d_or_c": self.data.shape[1], "kind": self.kind}
        )


@dataclass(frozen=True)
class SplitPlan:
    cal_fraction: float
    eval_fraction: float
    test_fraction: float
    seed: int = 0

    def __post_init__(self):
        fracs = (self.cal_fraction, self.eval_fraction, self.test_fraction)
        if any(f < 0 for f in fracs):
            raise ValueError("fractions must be nonnegative")
        if sum(fracs) > 1.0 + 1e-12:
            raise ValueError(f"fractions sum to {sum(fracs)} > 1")


def make_gaussian_mixture(
    n: int, d: int, c: int, separation: float, seed: int
) -> LabeledDataset:
    """i.i.d. mixture with unit covariance and equidistant class means.

    Means sit on a regular simplex scaled so every pairwise distance equals
    `separation`; labels are drawn uniformly. Requires c <= d so the simplex
    embeds isometrically.
    """
    if c < 2 or d < 2:
        raise ValueError("need c >= 2 and d >= 2")
    if c > d:
        raise ValueError(f"c={c} class means need c <= d={d} dimensions")
    means = np.zeros((c, d))
    # unit vectors e_i are sqrt(2) apart; rescale to the requested separation
    means[np.arange(c), np.arange(c)] = separation / np.sqrt(2.0)
    rng = substream(seed, "gaussian-mixture")
    labels = rng.integers(0, c, size=n)
    inputs = means[labels] + rng.standard_normal((n, d))
    return LabeledDataset(
        data=inputs, labels=labels, ids=np.arange(n), kind=RAW_INPUTS
    )


def split(
    dataset: LabeledDataset, plan: SplitPlan
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Seeded permutation, then contiguous cal / eval / test slices."""
    n = dataset.n
    perm = substream(plan.seed, "split-permutation").permutation(n)
    n_cal = int(plan.cal_fraction * n)
    n_eval = int(plan.eval_fraction * n)
    n_test = int(plan.test_fraction * n)
    cal = dataset.take(perm[:n_cal])
    eval_ = dataset.take(perm[n_cal : n_cal + n_eval])
    test = dataset.take(perm[n_cal + n_eval : n_cal + n_eval + n_test])
    return cal, eval_, test


def save_csv(dataset: LabeledDataset, path) -> None:
    """Write id,label,logit_0..logit_{c-1} rows; floats use repr (lossless)."""
    width = dataset.data.shape[1]
    prefix = "logit" if dataset.kind == PRECOMPUTED_LOGITS else "x"
    header = "id,label," + ",".join(f"{prefix}_{j}" for j in range(width))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for rid, label, row in zip(dataset.ids, dataset.labels, dataset.data):
            cells = ",".join(repr(float(v)) for v in row)
            fh.write(f"{rid},{label},{cells}\n")


def _load_csv(path, prefix: str, kind: str) -> LabeledDataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CsvFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    expected = ["id", "label"] + [f"{prefix}_{j}" for j in range(len(header) - 2)]
    if header != expected:
        raise CsvFormatError(
            f"{path}:1: malformed header {lines[0]!r}, expected {','.join(expected)!r}"
        )
    width = len(header) - 2
    ids, labels, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != width + 2:
            raise CsvFormatError(
                f"{path}:{lineno}: expected {width + 2} columns, got {len(cells)}"
            )
        try:
            labels.append(int(cells[1]))
            rows.append([float(v) for v in cells[2:]])
        except ValueError as exc:
            raise CsvFormatError(f"{path}:{lineno}: non-numeric cell ({exc})") from exc
        ids.append(cells[0])
    return LabeledDataset(
        data=np.array(rows, dtype=float).reshape(len(rows), width),
        labels=np.array(labels),
        ids=np.array(ids),
        kind=kind,
    )


def load_logits_csv(path) -> LabeledDataset:
    """Parse externally produced logits (header id,label,logit_0..)."""
    return _load_csv(path, "logit", PRECOMPUTED_LOGITS)


def load_inputs_csv(path) -> LabeledDataset:
    """Parse raw input features (header id,label,x_0..)."""
    return _load_csv(path, "x", RAW_INPUTS)
