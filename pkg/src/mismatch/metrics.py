"""Segmentation overlap and calibration metrics, plus their CSV emitters.

ECE follows the binned recipe: pixels are bucketed by confidence, and the
expected calibration error is the count-weighted mean absolute gap
between per-bin accuracy and per-bin mean confidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, ParameterError

METRICS_COLUMNS = ("experiment", "seed", "model", "iou", "ece")
RELIABILITY_COLUMNS = ("bin_low", "bin_high", "count", "accuracy",
                       "confidence")


def fmt_float(v: float) -> str:
    return f"{float(v):.10g}"


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Foreground decision p >= threshold; ties go to foreground."""
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must be in (0, 1), got {threshold}")
    return np.asarray(probs) >= threshold


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are
    empty (nothing to find, nothing found)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"iou: shapes {pred.shape} and {gt.shape} differ")
    p = pred != 0
    g = gt != 0
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


@dataclass
class ReliabilityBins:
    edges: np.ndarray       # (m+1,) bin boundaries
    counts: np.ndarray      # (m,) pixels per bin
    accuracy: np.ndarray    # (m,) mean correctness, 0.0 for empty bins
    confidence: np.ndarray  # (m,) mean confidence, 0.0 for empty bins

    @property
    def m(self) -> int:
        return len(self.counts)

    @property
    def n(self) -> int:
        return int(self.counts.sum())


def reliability_bins(probs: np.ndarray, gt: np.ndarray, m_bins: int = 10,
                     confidence: str = "max",
                     threshold: float = 0.5) -> ReliabilityBins:
    """Bucket pixels into equal-width confidence bins.

    confidence="max" uses max(p, 1-p) over [0.5, 1.0] (the prediction's
    own confidence); confidence="raw" uses the foreground probability over
    [0.0, 1.0]. Intervals are right-closed with the first bin left-closed,
    so every pixel lands in exactly one bin. Empty bins keep count 0 and
    zero accuracy/confidence, and weigh nothing in the ECE.
    """
    if m_bins < 1:
        raise ParameterError("m_bins must be >= 1")
    if confidence not in ("max", "raw"):
        raise ParameterError(f"unknown confidence mode {confidence!r}")
    p = np.asarray(probs, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise DimensionError(f"reliability_bins: {p.shape} vs {g.shape}")
    pred = p >= threshold
    correct = (pred == (g != 0)).astype(np.float64)
    if confidence == "max":
        conf = np.maximum(p, 1.0 - p)
        lo = 0.5
    else:
        conf = p
        lo = 0.0
    edges = np.linspace(lo, 1.0, m_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, m_bins - 1)
    counts = np.bincount(idx, minlength=m_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=m_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=m_bins)
    nz = counts > 0
    accuracy = np.zeros(m_bins)
    conf_mean = np.zeros(m_bins)
    accuracy[nz] = acc_sum[nz] / counts[nz]
    conf_mean[nz] = conf_sum[nz] / counts[nz]
    return ReliabilityBins(edges=edges, counts=counts, accuracy=accuracy,
                           confidence=conf_mean)


def ece(bins: ReliabilityBins) -> float:
    """Count-weighted mean |accuracy - confidence| across bins."""
    n = bins.n
    if n == 0:
        raise ParameterError("ece is undefined over zero pixels")
    w = bins.counts / n
    return float(np.sum(w * np.abs(bins.accuracy - bins.confidence)))


# ---------------------------------------------------------------------------
# CSV emitters

def emit_reliability_csv(bins: ReliabilityBins, path,
                         header_comments: tuple[str, ...] = ()) -> None:
    with open(path, "w", newline="") as f:
        for line in header_comments:
            f.write(f"# {line}\n")
        f.write(",".join(RELIABILITY_COLUMNS) + "\n")
        for i in range(bins.m):
            f.write(f"{fmt_float(bins.edges[i])},{fmt_float(bins.edges[i + 1])},"
                    f"{int(bins.counts[i])},{fmt_float(bins.accuracy[i])},"
                    f"{fmt_float(bins.confidence[i])}\n")


def read_reliability_csv(path) -> ReliabilityBins:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f
                 if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != ",".join(RELIABILITY_COLUMNS):
        raise FormatError(f"bad reliability header in {path}")
    lows, highs, counts, accs, confs = [], [], [], [], []
    for ln in lines[1:]:
        lo, hi, cnt, acc, conf = ln.split(",")
        lows.append(float(lo))
        highs.append(float(hi))
        counts.append(int(cnt))
        accs.append(float(acc))
        confs.append(float(conf))
    edges = np.array(lows + [highs[-1]]) if lows else np.array([])
    return ReliabilityBins(edges=edges, counts=np.array(counts),
                           accuracy=np.array(accs),
                           confidence=np.array(confs))


@dataclass
class MetricsRow:
    experiment: str
    seed: int
    model: str
    iou: float
    ece: float


def emit_metrics_csv(rows: list[MetricsRow], path,
                     header_comments: tuple[str, ...] = ()) -> None:
    with open(path, "w", newline="") as f:
        for line in header_comments:
            f.write(f"# {line}\n")
        f.write(",".join(METRICS_COLUMNS) + "\n")
        for r in rows:
            f.write(f"{r.experiment},{r.seed},{r.model},{fmt_float(r.iou)},"
                    f"{fmt_float(r.ece)}\n")


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f
                 if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != ",".join(METRICS_COLUMNS):
        raise FormatError(f"bad metrics header in {path}")
    rows = []
    for ln in lines[1:]:
        exp, seed, model, iou_v, ece_v = ln.split(",")
        rows.append(MetricsRow(exp, int(seed), model, float(iou_v),
                               float(ece_v)))
    return rows
