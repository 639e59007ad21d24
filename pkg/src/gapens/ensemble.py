"""Prediction averaging across weak learners and the spread-vs-error analysis."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._io import atomic_write_text
from .errors import (
    EmptyMatrix,
    IndexMismatch,
    LengthMismatch,
    MissingTargets,
    TooFewLearners,
    ZeroVariance,
)


@dataclass
class PredictionMatrix:
    """``values[l, j]`` is learner ``l``'s prediction for molecule ``indices[j]``."""

    learner_labels: list[str]
    values: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.values.size == 0 or self.values.shape[0] == 0:
            raise EmptyMatrix("prediction matrix has no learners")
        if self.values.shape[1] != self.indices.shape[0]:
            raise LengthMismatch(f"{self.values.shape[1]} columns but {self.indices.shape[0]} indices")
        if len(self.learner_labels) != self.values.shape[0]:
            raise LengthMismatch("one label per learner row is required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("predictions must be finite")

    @property
    def num_learners(self) -> int:
        return self.values.shape[0]


def ensemble_mean(m: PredictionMatrix) -> np.ndarray:
    if m.values.shape[0] == 0:
        raise EmptyMatrix("no learners to average")
    return m.values.mean(axis=0)


def ensemble_all(matrices: Sequence[PredictionMatrix]) -> PredictionMatrix:
    """Stack learners from several matrices sharing one molecule index vector."""
    if not matrices:
        raise EmptyMatrix("no matrices to combine")
    ref = matrices[0].indices
    for m in matrices[1:]:
        if not np.array_equal(m.indices, ref):
            raise IndexMismatch("prediction matrices cover different molecules")
    labels = [lab for m in matrices for lab in m.learner_labels]
    return PredictionMatrix(labels, np.vstack([m.values for m in matrices]), ref.copy())


def uncertainty_std(m: PredictionMatrix) -> np.ndarray:
    """Per-molecule sample standard deviation (divisor L - 1) across learners."""
    if m.num_learners < 2:
        raise TooFewLearners(f"need >= 2 learners for a spread, got {m.num_learners}")
    return m.values.std(axis=0, ddof=1)


# Spreads that agree to this relative precision are treated as constant, so
# float jitter from e.g. per-learner constant offsets does not fake a trend.
CONSTANT_RTOL = 1e-12


def _is_constant(v: np.ndarray) -> bool:
    return float(v.max() - v.min()) <= CONSTANT_RTOL * float(np.abs(v).max())


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"pearson needs equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise LengthMismatch("pearson needs at least two points")
    if _is_constant(x) or _is_constant(y):
        raise ZeroVariance("pearson undefined for a constant vector")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass
class Bin:
    lower: float
    upper: float
    mean_uncertainty: float | None
    mean_abs_error: float | None
    count: int


@dataclass
class UncertaintyReport:
    mean: np.ndarray
    std: np.ndarray
    abs_error: np.ndarray
    pearson_r: float | None
    pearson_binned: float | None
    bins: list[Bin] = field(default_factory=list)
    zero_variance: bool = False


def _bin_edges(std: np.ndarray, n_bins: int) -> np.ndarray:
    lo, hi = float(std.min()), float(std.max())
    return np.linspace(lo, hi, n_bins + 1)


def bin_by_uncertainty(std: np.ndarray, abs_error: np.ndarray, n_bins: int) -> list[Bin]:
    """Equal-width bins over the observed spread; right-open except the last."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    edges = _bin_edges(std, n_bins)
    if _is_constant(std):
        n_bins = 1
        which = np.zeros(std.shape[0], dtype=np.int64)
        edges = np.array([edges[0], edges[-1]])
    else:
        which = np.clip(np.searchsorted(edges, std, side="right") - 1, 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        sel = which == b
        cnt = int(sel.sum())
        bins.append(Bin(
            lower=float(edges[b]),
            upper=float(edges[b + 1]),
            mean_uncertainty=float(std[sel].mean()) if cnt else None,
            mean_abs_error=float(abs_error[sel].mean()) if cnt else None,
            count=cnt,
        ))
    return bins


def error_vs_uncertainty(m: PredictionMatrix, targets, n_bins: int = 20) -> UncertaintyReport:
    """Correlate per-molecule learner spread with the ensemble's absolute error.

    ``pearson_r`` uses raw (std, |error|) pairs; ``pearson_binned`` uses the
    non-empty bin means.  Either is None when undefined.
    """
    if m.num_learners < 2:
        raise TooFewLearners(f"need >= 2 learners, got {m.num_learners}")
    targets = np.asarray([np.nan if t is None else t for t in targets], dtype=np.float64)
    if targets.shape[0] != m.values.shape[1] or np.any(np.isnan(targets)):
        raise MissingTargets("a target is required for every molecule in the matrix")
    mean = ensemble_mean(m)
    std = uncertainty_std(m)
    err = np.abs(mean - targets)
    bins = bin_by_uncertainty(std, err, n_bins)

    zero_var = False
    try:
        r = pearson(std, err)
    except ZeroVariance:
        r, zero_var = None, True
    full = [b for b in bins if b.count]
    try:
        rb = pearson([b.mean_uncertainty for b in full], [b.mean_abs_error for b in full]) if len(full) >= 2 else None
    except ZeroVariance:
        rb = None
    return UncertaintyReport(mean, std, err, r, rb, bins, zero_var)


@dataclass
class BoundCheck:
    ensemble_mae: float
    mean_individual_mae: float
    holds: bool


def ensemble_mae_bound_check(m: PredictionMatrix, targets) -> BoundCheck:
    """MAE of the averaged prediction against the average of per-learner MAEs."""
    targets = np.asarray([np.nan if t is None else t for t in targets], dtype=np.float64)
    if targets.shape[0] != m.values.shape[1] or np.any(np.isnan(targets)):
        raise MissingTargets("a target is required for every molecule in the matrix")
    ens = float(np.mean(np.abs(ensemble_mean(m) - targets)))
    indiv = float(np.mean(np.abs(m.values - targets[None, :]).mean(axis=1)))
    return BoundCheck(ens, indiv, ens <= indiv + 1e-12)


# --- files ------------------------------------------------------------------


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def write_predictions(path, indices, preds) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "prediction"])
    for i, p in zip(indices, preds):
        w.writerow([int(i), repr(float(p))])
    atomic_write_text(path, buf.getvalue())


def read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["index", "prediction"]:
            raise ValueError(f"{path}: expected header index,prediction")
        rows = [(int(r["index"]), float(r["prediction"])) for r in reader]
    idx = np.array([r[0] for r in rows], dtype=np.int64)
    return idx, np.array([r[1] for r in rows], dtype=np.float64)


def load_prediction_files(paths: Sequence) -> PredictionMatrix:
    if not paths:
        raise EmptyMatrix("no prediction files given")
    ref = None
    rows = []
    for p in paths:
        idx, vals = read_predictions(p)
        if ref is None:
            ref = idx
        elif not np.array_equal(idx, ref):
            raise IndexMismatch(f"{p} lists different molecule indices than {paths[0]}")
        rows.append(vals)
    return PredictionMatrix([str(p) for p in paths], np.vstack(rows), ref)


def write_ensemble(path, m: PredictionMatrix) -> None:
    mean = ensemble_mean(m)
    std = uncertainty_std(m) if m.num_learners >= 2 else [None] * len(mean)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "mean", "std"])
    for i, mu, s in zip(m.indices, mean, std):
        w.writerow([int(i), repr(float(mu)), _fmt(s)])
    atomic_write_text(path, buf.getvalue())


def read_ensemble(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Return (indices, mean, std); std is None if the file carries no spread."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["index", "mean", "std"]:
            raise ValueError(f"{path}: expected header index,mean,std")
        rows = list(reader)
    idx = np.array([int(r["index"]) for r in rows], dtype=np.int64)
    mean = np.array([float(r["mean"]) for r in rows])
    if any(r["std"] == "" for r in rows):
        return idx, mean, None
    return idx, mean, np.array([float(r["std"]) for r in rows])


def report_csv(bins: Sequence[Bin]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lower", "bin_upper", "mean_uncertainty", "mean_abs_error", "count"])
    for b in bins:
        w.writerow([repr(b.lower), repr(b.upper), _fmt(b.mean_uncertainty), _fmt(b.mean_abs_error), b.count])
    return buf.getvalue()


def summary_line(pearson_raw, pearson_binned, ensemble_mae, mean_individual_mae, zero_variance=False) -> str:
    def f(x):
        return "none" if x is None else f"{x:.6f}"

    line = (
        f"pearson_raw={f(pearson_raw)} pearson_binned={f(pearson_binned)} "
        f"ensemble_mae={f(ensemble_mae)} mean_individual_mae={f(mean_individual_mae)}"
    )
    if zero_variance:
        line += " note=zero_variance"
    return line
