"""Image-quality metrics and the paired significance test used in evaluation.

All functions here are pure numpy on plain arrays (no autodiff involvement)
and operate on the de-normalized intensity convention: ``data_range`` comes
from the task's per-modality normalization range, not per-image extrema, so
reported dB values are comparable across images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError, ContractError

__all__ = [
    "psnr",
    "ssim",
    "wilcoxon_signed_rank",
    "ImageMetrics",
    "MetricReport",
    "build_report",
]


def psnr(y_syn: np.ndarray, y_act: np.ndarray, data_range: float) -> float:
    """10*log10(range^2 / MSE) in dB; +inf for identical images."""
    y_syn = np.asarray(y_syn, dtype=np.float64)
    y_act = np.asarray(y_act, dtype=np.float64)
    if y_syn.shape != y_act.shape:
        raise ConfigError(f"psnr shapes differ: {y_syn.shape} vs {y_act.shape}")
    if data_range <= 0:
        raise ConfigError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((y_syn - y_act) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2
    coords = np.arange(size, dtype=np.float64) - half
    g1 = np.exp(-(coords**2) / (2 * sigma * sigma))
    win = np.outer(g1, g1)
    return win / win.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img, win.shape)
    return np.tensordot(view, win, axes=((2, 3), (0, 1)))


def ssim(y_syn: np.ndarray, y_act: np.ndarray, data_range: float,
         window_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local-statistics structural similarity with a Gaussian window."""
    a = np.asarray(y_syn, dtype=np.float64)
    b = np.asarray(y_act, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ConfigError(f"ssim expects 2-D images, got {a.shape}")
    if min(a.shape) < window_size:
        raise ConfigError(f"image {a.shape} smaller than {window_size}x{window_size} window")
    if data_range <= 0:
        raise ConfigError(f"data_range must be positive, got {data_range}")
    win = _gaussian_window(window_size, sigma)
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# -- Wilcoxon signed-rank test ----------------------------------------------------


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1  # average of ranks i+1..j+1
        i = j + 1
    return ranks


def _exact_two_sided_p(ranks: np.ndarray, w_plus: float) -> float:
    # DP over the 2^n equally likely sign assignments; half-rank units keep
    # tied (x.5) average ranks integral.  counts[w] = number of assignments
    # whose positive-rank sum equals w half-units.
    units = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(units.sum()) + 1, dtype=np.float64)
    counts[0] = 1.0
    for u in units:
        shifted = np.zeros_like(counts)
        shifted[u:] = counts[: counts.size - u]
        counts += shifted
    total = counts.sum()
    w_units = int(round(2 * w_plus))
    cdf_le = counts[: w_units + 1].sum() / total
    cdf_ge = counts[w_units:].sum() / total
    return min(1.0, 2.0 * min(cdf_le, cdf_ge))


def _normal_approx_two_sided_p(ranks: np.ndarray, w_plus: float) -> float:
    n = ranks.size
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    # tie correction: subtract sum(t^3 - t)/48 over groups of tied |d|
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    if var <= 0:
        raise ContractError("degenerate rank variance (all values tied)")
    diff = w_plus - mean
    z = (diff - 0.5 * np.sign(diff)) / math.sqrt(var)  # continuity correction
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))  # 2 * normal sf(|z|)


def wilcoxon_signed_rank(paired_a, paired_b, method: str = "auto") -> float:
    """Two-sided p-value for paired differences.

    Exact sign-assignment enumeration for n <= 20 nonzero differences,
    normal approximation with tie correction above that.  ``method`` forces
    a branch ("exact" | "approx") for cross-checking.
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError(f"paired inputs must be equal-length 1-D, got {a.shape}, {b.shape}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise ContractError("signed-rank test undefined: all differences are zero")
    if n < 5:
        raise ContractError(f"need at least 5 nonzero differences, have {n}")
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "exact" or (method == "auto" and n <= 20):
        return _exact_two_sided_p(ranks, w_plus)
    if method in ("approx", "auto"):
        return _normal_approx_two_sided_p(ranks, w_plus)
    raise ContractError(f"unknown method '{method}'")


# -- reports ------------------------------------------------------------------------


@dataclass
class ImageMetrics:
    ident: str
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    task: str
    rows: list[ImageMetrics] = field(default_factory=list)
    psnr_mean: float = math.nan
    psnr_std: float = math.nan
    ssim_mean: float = math.nan
    ssim_std: float = math.nan
    psnr_inf_count: int = 0
    p_values: dict[str, float] = field(default_factory=dict)


def build_report(task: str, rows: list[ImageMetrics]) -> MetricReport:
    """Aggregate per-image metrics; infinite PSNR entries are flagged and
    excluded from the mean/std (sample std, ddof=1)."""
    report = MetricReport(task=task, rows=list(rows))
    psnrs = np.array([r.psnr for r in rows], dtype=np.float64)
    ssims = np.array([r.ssim for r in rows], dtype=np.float64)
    finite = np.isfinite(psnrs)
    report.psnr_inf_count = int((~finite).sum())
    if finite.any():
        vals = psnrs[finite]
        report.psnr_mean = float(vals.mean())
        report.psnr_std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    if rows:
        report.ssim_mean = float(ssims.mean())
        report.ssim_std = float(ssims.std(ddof=1)) if ssims.size > 1 else 0.0
    return report
