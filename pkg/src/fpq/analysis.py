"""Distribution diagnostics, error metrics and seeded synthetic tensors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .quant import QuantizedTensor, dequantize

DEFAULT_BINS = 100
OUTLIER_SIGMAS = 6.0
# median absolute deviation -> standard deviation for Gaussian data
MAD_TO_STD = 1.482602218505602

KINDS = ("normal", "outlier_injected", "relu_skewed")


@dataclass
class DistributionReport:
    count: int
    min: float
    max: float
    mean: float
    std: float
    skewness: float
    excess_kurtosis: float
    histogram: list
    bin_edges: list
    outlier_count: int
    outlier_threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


def moments(x: np.ndarray) -> tuple[float, float, float, float]:
    """Two-pass mean, population std, skewness and excess kurtosis.

    Zero-variance input reports skewness and excess kurtosis of 0.
    """
    mean = float(x.mean())
    d = x - mean
    m2 = float(np.mean(d * d))
    if m2 == 0.0:
        return mean, 0.0, 0.0, 0.0
    m3 = float(np.mean(d * d * d))
    m4 = float(np.mean((d * d) * (d * d)))
    return mean, math.sqrt(m2), m3 / m2**1.5, m4 / (m2 * m2) - 3.0


def robust_sigma(x: np.ndarray) -> tuple[float, float]:
    """(median, MAD-based standard deviation estimate)."""
    med = float(np.median(x))
    return med, MAD_TO_STD * float(np.median(np.abs(x - med)))


def summarize(tensor, bins: int = DEFAULT_BINS) -> DistributionReport:
    """Moments, a ``bins``-bin histogram over [min, max], and an outlier count.

    Outliers are entries more than 6 robust standard deviations (MAD based)
    from the median.  A robust spread is used because a single extreme value
    inflates the plain standard deviation enough to hide itself in small
    tensors.
    """
    x = np.asarray(tensor, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot summarize an empty tensor")
    if not np.isfinite(x).all():
        raise ValueError("tensor contains non-finite values")
    if bins < 1:
        raise ValueError(f"bins must be positive, got {bins}")
    lo, hi = float(x.min()), float(x.max())
    mean, std, skew, kurt = moments(x)
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    med, sigma = robust_sigma(x)
    threshold = OUTLIER_SIGMAS * sigma
    outliers = int(np.count_nonzero(np.abs(x - med) > threshold))
    return DistributionReport(
        count=int(x.size), min=lo, max=hi, mean=mean, std=std,
        skewness=skew, excess_kurtosis=kurt,
        histogram=counts.tolist(), bin_edges=edges.tolist(),
        outlier_count=outliers, outlier_threshold=threshold,
    )


def histogram_text(report: DistributionReport) -> str:
    """Two-column (bin center, count) text, gnuplot ready."""
    edges = np.asarray(report.bin_edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return "".join(f"{c!r} {n}\n" for c, n in zip(centers.tolist(), report.histogram))


def cluster_outlier_vector() -> np.ndarray:
    """Fourteen clustered values 0.1 ... 1.4 followed by a single outlier of 100."""
    return np.array([0.1 * k for k in range(1, 15)] + [100.0])


def gen_synthetic(kind: str, shape, seed: int, rate: float = 0.01,
                  magnitude: float = 100.0) -> np.ndarray:
    """Seeded synthetic tensors for the three activation regimes.

    ``normal``: standard Gaussian.  ``outlier_injected``: Gaussian with
    ``max(1, round(rate * size))`` entries replaced by ``+-magnitude * std``.
    ``relu_skewed``: ``max(0, N(0, 1))``.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    shape = tuple(int(d) for d in np.atleast_1d(shape))
    if any(d < 1 for d in shape):
        raise ValueError(f"invalid shape {shape}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    if kind == "relu_skewed":
        return np.maximum(x, 0.0)
    if kind == "outlier_injected":
        if not 0.0 < rate < 1.0:
            raise ValueError(f"rate must be in (0, 1), got {rate}")
        n_out = max(1, int(round(rate * x.size)))
        idx = rng.choice(x.size, size=n_out, replace=False)
        signs = rng.choice([-1.0, 1.0], size=n_out)
        flat = x.reshape(-1)
        flat[idx] = signs * magnitude * x.std()
    return x


@dataclass
class ErrorReport:
    mse: float
    max_abs_err: float
    sqnr_db: float
    frobenius: float
    proxy_loss: float | None = None
    per_group_mse: list | None = None
    subset_max_abs_err: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["sqnr_db"]):
            d["sqnr_db"] = "inf"
        return d


def _candidate_values(c) -> np.ndarray:
    return dequantize(c) if isinstance(c, QuantizedTensor) else np.asarray(c, dtype=np.float64)


def error_report(W, approx, calib=None, subset=None) -> ErrorReport:
    """Error of ``approx`` (an array or QuantizedTensor) against ``W``.

    ``calib`` ([n, in]) adds the proxy loss ``||(W - approx) X^T||_F``;
    ``subset`` (boolean mask) adds the max absolute error on those entries.
    """
    W = np.asarray(W, dtype=np.float64)
    W_hat = _candidate_values(approx)
    if W_hat.shape != W.shape:
        raise ValueError(f"candidate shape {W_hat.shape} does not match {W.shape}")
    err = W - W_hat
    mse = float(np.mean(err * err))
    signal = float(np.mean(W * W))
    if mse == 0.0:
        sqnr = math.inf
    elif signal == 0.0:
        sqnr = -math.inf
    else:
        sqnr = 10.0 * math.log10(signal / mse)
    rep = ErrorReport(
        mse=mse,
        max_abs_err=float(np.max(np.abs(err))),
        sqnr_db=sqnr,
        frobenius=float(np.linalg.norm(err)),
    )
    if calib is not None:
        X = getattr(calib, "samples", calib)
        X = np.asarray(X, dtype=np.float64)
        rep.proxy_loss = float(np.linalg.norm(err.reshape(-1, X.shape[1]) @ X.T))
    if isinstance(approx, QuantizedTensor) and approx.spec.granularity != "tensor":
        idx = approx.scale_index().reshape(-1)
        sq = (err * err).reshape(-1)
        sums = np.bincount(idx, weights=sq, minlength=approx.scales.size)
        counts = np.bincount(idx, minlength=approx.scales.size)
        rep.per_group_mse = (sums / np.maximum(counts, 1)).tolist()
    if subset is not None:
        mask = np.asarray(subset, dtype=bool)
        rep.subset_max_abs_err = float(np.max(np.abs(err[mask]))) if mask.any() else 0.0
    return rep


@dataclass
class Comparison:
    reports: list
    winners: dict

    def __len__(self):
        return len(self.reports)

    def __getitem__(self, i):
        return self.reports[i]

    def __iter__(self):
        return iter(self.reports)


WINNER_METRICS = ("mse", "max_abs_err", "frobenius", "proxy_loss", "subset_max_abs_err")


def compare(W, candidates, calib=None, subset=None) -> Comparison:
    """One ErrorReport per candidate (order preserved) plus the best index per metric.

    Ties go to the earliest candidate.
    """
    reports = [error_report(W, c, calib=calib, subset=subset) for c in candidates]
    winners = {}
    for metric in WINNER_METRICS + ("sqnr_db",):
        vals = [getattr(r, metric) for r in reports]
        if not vals or vals[0] is None:
            continue
        winners[metric] = int(np.argmax(vals)) if metric == "sqnr_db" else int(np.argmin(vals))
    return Comparison(reports=reports, winners=winners)
