"""Summary statistics and uncertainty metrics used by the GRNG and BNN checks."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.special import ndtri


class DegenerateInput(ValueError):
    pass


class InvalidArgument(ValueError):
    pass


class EmptyRetention(Exception):
    """No prediction survives the entropy threshold.

    Not an error in the usual sense: the caller decides how to treat a
    threshold that defers everything.
    """


@dataclass(frozen=True)
class SampleSummary:
    n: int
    mean: float
    sd: float
    min: float
    max: float


def summarize(samples) -> SampleSummary:
    x = np.asarray(samples, float).ravel()
    if x.size == 0:
        raise DegenerateInput("no samples")
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return SampleSummary(int(x.size), float(x.mean()), sd, float(x.min()), float(x.max()))


def normal_order_medians(n: int) -> np.ndarray:
    """Theoretical standard-normal quantiles at Blom plotting positions."""
    i = np.arange(1, n + 1)
    return ndtri((i - 0.375) / (n + 0.25))


def qq_points(samples) -> tuple[np.ndarray, np.ndarray]:
    """(theoretical_quantile, sample_quantile) pairs of a normal probability plot."""
    x = np.sort(np.asarray(samples, float).ravel())
    return normal_order_medians(x.size), x


def qq_rvalue(samples) -> float:
    """Correlation coefficient of the normal probability plot."""
    x = np.asarray(samples, float).ravel()
    if x.size < 3:
        raise InvalidArgument("need at least 3 samples")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("samples must be finite")
    theo, xs = qq_points(x)
    xs = xs - xs.mean()
    if not np.any(xs):
        raise DegenerateInput("samples have zero variance")
    theo = theo - theo.mean()
    r = float(np.dot(theo, xs) / math.sqrt(np.dot(theo, theo) * np.dot(xs, xs)))
    return max(-1.0, min(1.0, r))


def predictive_entropy(mean_probs, atol: float = 1e-6) -> float:
    """Shannon entropy (nats) of a probability vector, with 0 ln 0 = 0."""
    p = np.asarray(mean_probs, float)
    if p.ndim != 1 or p.size == 0:
        raise InvalidArgument("expected a non-empty probability vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > atol:
        raise InvalidArgument("probabilities must be non-negative and sum to 1")
    nz = p[p > 0]
    h = float(-np.sum(nz * np.log(nz)))
    return min(max(h, 0.0), math.log(p.size))


def entropy_rows(probs) -> np.ndarray:
    """Row-wise entropy for a (N, K) matrix; no normalization checks."""
    p = np.asarray(probs, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(p), 0.0)
    return -t.sum(axis=-1)


class CalibrationBin(NamedTuple):
    confidence_mid: float
    accuracy: float
    weight: float
    mean_confidence: float
    count: int


@dataclass(frozen=True)
class CalibrationReport:
    bins: list
    ece: float
    n_bins: int

    @property
    def ece_percent(self) -> float:
        return 100.0 * self.ece


def ece(confidences, correct, n_bins: int = 15) -> CalibrationReport:
    """Binned expected calibration error over equal-width confidence bins.

    The top bin is closed so that confidence 1.0 is counted.
    """
    if n_bins < 1:
        raise InvalidArgument("n_bins must be >= 1")
    conf = np.asarray(confidences, float).ravel()
    hit = np.asarray(correct, bool).ravel()
    if conf.size == 0 or conf.size != hit.size:
        raise InvalidArgument("need matching, non-empty confidences and outcomes")
    if np.any(conf < 0) or np.any(conf > 1):
        raise InvalidArgument("confidences must lie in [0, 1]")
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    n = conf.size
    bins, total = [], 0.0
    for b in range(n_bins):
        m = idx == b
        k = int(m.sum())
        mid = (b + 0.5) / n_bins
        if k == 0:
            bins.append(CalibrationBin(mid, 0.0, 0.0, mid, 0))
            continue
        acc = float(hit[m].mean())
        mc = float(conf[m].mean())
        bins.append(CalibrationBin(mid, acc, k / n, mc, k))
        total += k / n * abs(acc - mc)
    return CalibrationReport(bins, float(total), n_bins)


class Recovery(NamedTuple):
    retained_fraction: float
    accuracy_delta: float


def accuracy_recovery(entropies, correct, threshold: float) -> Recovery:
    """Accuracy gain from deferring predictions whose entropy exceeds ``threshold``."""
    h = np.asarray(entropies, float).ravel()
    hit = np.asarray(correct, bool).ravel()
    if h.size == 0 or h.size != hit.size:
        raise InvalidArgument("need matching, non-empty entropies and outcomes")
    if np.any(h < 0):
        raise InvalidArgument("entropies must be >= 0")
    keep = h <= threshold
    if not keep.any():
        raise EmptyRetention(f"no predictions retained at threshold {threshold}")
    return Recovery(float(keep.mean()), float(hit[keep].mean() - hit.mean()))


def recovery_curve(entropies, correct, thresholds: Iterable[float]) -> list:
    """(threshold, retained_fraction, accuracy_delta) rows; empty retention gives NaNs."""
    rows = []
    for t in thresholds:
        try:
            r = accuracy_recovery(entropies, correct, t)
            rows.append((float(t), r.retained_fraction, r.accuracy_delta))
        except EmptyRetention:
            rows.append((float(t), 0.0, float("nan")))
    return rows


def default_thresholds() -> list:
    return [round(0.05 * k, 2) for k in range(13)]


def _write_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def qq_csv(samples) -> str:
    theo, xs = qq_points(samples)
    return _write_csv(("index", "sample_quantile", "theoretical_quantile"),
                      ((i, float(s), float(t)) for i, (s, t) in enumerate(zip(xs, theo))))


def histogram_csv(samples, bins: int = 50) -> str:
    counts, edges = np.histogram(np.asarray(samples, float), bins=bins)
    return _write_csv(("bin_left", "bin_right", "count"),
                      ((float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)))


def calibration_csv(report: CalibrationReport) -> str:
    return _write_csv(("confidence_mid", "accuracy", "weight", "mean_confidence", "count"),
                      (tuple(b) for b in report.bins))
