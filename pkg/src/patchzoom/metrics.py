"""Evaluation quantities: classification scores, calibration, compressibility,
tumor hit ratio and attention overlap, plus the line-delimited metric records."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats


class MetricConfigError(ValueError):
    pass


class UndefinedMetricWarning(UserWarning):
    """AUC requested on a label set with a single class."""


@dataclass
class ClassificationMetrics:
    accuracy: float
    auc: float      # nan when only one class is present
    f1: float


def auc_score(y_hat: Sequence[float], y: Sequence[int]) -> float:
    """Area under the ROC curve from midranks (ties count one half)."""
    s = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC is undefined when only one class is present")
    ranks = stats.rankdata(s, method="average")
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def f1_score(pred: np.ndarray, y: np.ndarray) -> float:
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def classification_metrics(y_hat: Sequence[float], y: Sequence[int], threshold: float = 0.5) -> ClassificationMetrics:
    s = np.asarray(y_hat, dtype=np.float64)
    labels = np.asarray(y).astype(bool)
    if s.shape != labels.shape or s.size == 0:
        raise ValueError(f"need matching nonempty inputs, got {s.shape} and {labels.shape}")
    pred = s >= threshold
    acc = float((pred == labels).mean())
    try:
        auc = auc_score(s, labels)
    except ValueError:
        warnings.warn("single-class labels: AUC undefined", UndefinedMetricWarning, stacklevel=2)
        auc = math.nan
    return ClassificationMetrics(acc, auc, f1_score(pred, labels))


def bce(y_hat: Sequence[float], y: Sequence[int], eps: float = 1e-7) -> float:
    p = np.clip(np.asarray(y_hat, dtype=np.float64), eps, 1 - eps)
    t = np.asarray(y, dtype=np.float64)
    return float(-(t * np.log(p) + (1 - t) * np.log(1 - p)).mean())


@dataclass
class CalibrationReport:
    counts: np.ndarray      # |B_m|
    accuracy: np.ndarray    # acc(B_m), 0 for empty bins
    confidence: np.ndarray  # conf(B_m), 0 for empty bins
    ece: float

    @property
    def M(self) -> int:
        return len(self.counts)


def ece(y_hat: Sequence[float], y: Sequence[int], M: int = 10) -> CalibrationReport:
    """Expected calibration error over ``M`` equal-width confidence bins.

    Confidence is ``max(y_hat, 1 - y_hat)``; bins are ``[m/M, (m+1)/M)`` with
    the last one closed.
    """
    p = np.asarray(y_hat, dtype=np.float64)
    labels = np.asarray(y).astype(bool)
    if p.size == 0:
        raise ValueError("ece needs at least one prediction")
    if M < 1:
        raise MetricConfigError(f"M must be >= 1, got {M}")
    conf = np.maximum(p, 1.0 - p)
    correct = (p >= 0.5) == labels
    edges = np.arange(M + 1) / M
    bins = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, M - 1)
    counts = np.bincount(bins, minlength=M)
    acc_sum = np.bincount(bins, weights=correct.astype(np.float64), minlength=M)
    conf_sum = np.bincount(bins, weights=conf, minlength=M)
    nz = counts > 0
    acc = np.where(nz, acc_sum / np.maximum(counts, 1), 0.0)
    cb = np.where(nz, conf_sum / np.maximum(counts, 1), 0.0)
    value = float(np.sum(counts / p.size * np.abs(acc - cb)))
    return CalibrationReport(counts, acc, cb, value)


@dataclass
class CompressibilityInputs:
    W: int
    H: int
    N: int
    k: int
    d: int
    model_kind: str = "sequential"     # "full-resolution" | "sequential"

    def __post_init__(self):
        for name in ("W", "H", "N", "k", "d"):
            if getattr(self, name) <= 0:
                raise MetricConfigError(f"{name} must be positive")
        if self.model_kind not in ("full-resolution", "sequential"):
            raise MetricConfigError(f"unknown model_kind {self.model_kind!r}")


def compressibility(inputs: CompressibilityInputs) -> Fraction:
    """Raw pixel count over stored feature size, as an exact fraction."""
    pixels = inputs.W * inputs.H * 3
    if inputs.model_kind == "full-resolution":
        return Fraction(pixels, inputs.N * inputs.k * inputs.d)
    return Fraction(pixels, inputs.N * inputs.d)


@dataclass
class HitRatioSeries:
    values: np.ndarray      # cumulative hit ratio after each step
    budget: int
    tumor_count: int
    defined: bool           # False on slides without tumor patches (series is all zero)


def hit_ratio_series(actions: Sequence[int], tumor_mask: Sequence[bool], budget: int) -> HitRatioSeries:
    actions = np.asarray(actions, dtype=np.int64)
    tumor = np.asarray(tumor_mask, dtype=bool)
    if len(actions) != budget:
        raise ValueError(f"budget {budget} does not match trace length {len(actions)}")
    n_tumor = int(tumor.sum())
    if n_tumor == 0:
        return HitRatioSeries(np.zeros(budget), budget, 0, False)
    hits = np.cumsum(tumor[actions])
    return HitRatioSeries(hits / min(budget, n_tumor), budget, n_tumor, True)


def attention_overlap(actions: Sequence[int], alpha: Sequence[float], top_count: int) -> tuple[float, float]:
    """Fraction of the ``top_count`` most attended patches that were sampled, and
    the mean attention of the sampled patches."""
    a = np.asarray(alpha, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    if not 1 <= top_count <= a.size:
        raise MetricConfigError(f"top_count must lie in [1, N={a.size}], got {top_count}")
    top = np.argsort(-a, kind="stable")[:top_count]
    overlap = len(set(top.tolist()) & set(actions.tolist())) / top_count
    return overlap, float(a[actions].mean()) if actions.size else 0.0


def paired_rank_test(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples (1.0 if all pairs tie)."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if np.all(diff == 0):
        return 1.0
    return float(stats.wilcoxon(diff, alternative="two-sided").pvalue)


# --- metric records --------------------------------------------------------

@dataclass(frozen=True)
class MetricRecord:
    name: str
    value: float
    cohort: str
    seed: int


def format_records(records: Iterable[MetricRecord]) -> str:
    return "".join(f"{r.name}\t{r.value!r}\t{r.cohort}\t{r.seed}\n" for r in records)


def parse_records(text: str) -> list[MetricRecord]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
        out.append(MetricRecord(parts[0], float(parts[1]), parts[2], int(parts[3])))
    return out


def write_records(records: Iterable[MetricRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_records(records))
    return path


def read_records(path) -> list[MetricRecord]:
    return parse_records(Path(path).read_text())
