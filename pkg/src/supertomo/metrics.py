"""Image-quality and data-fit figures of merit."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal, stats

from .tv import as_grid, tv_value


def mse(x, x_ref) -> float:
    x, x_ref = np.asarray(x, dtype=float), np.asarray(x_ref, dtype=float)
    if x.shape != x_ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_ref.shape}")
    return float(np.mean((x - x_ref) ** 2))


@dataclass(frozen=True)
class SsimParams:
    """Gaussian-window SSIM settings; ``data_range=None`` means ``max(x_ref)``."""

    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float | None = None

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window size must be odd")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("K1 and K2 must be positive")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, x_ref, params: SsimParams = SsimParams()) -> float:
    """Mean SSIM over all fully contained windows."""
    x, x_ref = as_grid(x), as_grid(x_ref)
    if x.shape != x_ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_ref.shape}")
    if x.shape[0] < params.window:
        raise ValueError("image is smaller than the SSIM window")
    L = float(np.max(x_ref)) if params.data_range is None else float(params.data_range)
    if not L > 0:
        raise ValueError("dynamic range must be positive")
    c1, c2 = (params.k1 * L) ** 2, (params.k2 * L) ** 2
    w = gaussian_window(params.window, params.sigma)

    def filt(a):
        return signal.correlate2d(a, w, mode="valid")

    mu_x, mu_y = filt(x), filt(x_ref)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(x_ref * x_ref) - mu_y * mu_y
    sxy = filt(x * x_ref) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def kl_fit(objective, x) -> float:
    """KL distance between the data and ``Rx`` (zero at a perfect fit)."""
    return objective.kl(x)


def tv_of(x) -> float:
    return tv_value(x)


def estimation_error(x, x_true) -> float:
    return float(np.linalg.norm(np.ravel(x) - np.ravel(x_true)))


@dataclass(frozen=True)
class SummaryRow:
    metric: str
    mean: float
    ci99: float
    n: int


def mean_ci(values, level: float = 0.99) -> tuple[float, float]:
    """Sample mean and Student-t confidence half-width."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("need at least two repetitions for a confidence interval")
    half = stats.t.ppf(0.5 + level / 2.0, v.size - 1) * v.std(ddof=1) / np.sqrt(v.size)
    return float(v.mean()), float(half)


def summarize(runs, level: float = 0.99) -> list[SummaryRow]:
    """Per-metric mean and 99% CI over repetitions.

    ``runs`` is a sequence of ``{metric: value}`` mappings; NaN values (for
    instance timings that were not recorded) are dropped per metric.
    """
    runs = list(runs)
    if len(runs) < 2:
        raise ValueError("need at least two repetitions")
    rows = []
    for name in runs[0]:
        vals = np.array([r[name] for r in runs], dtype=float)
        vals = vals[~np.isnan(vals)]
        if vals.size >= 2:
            mean, half = mean_ci(vals, level)
        else:
            mean = float(vals[0]) if vals.size else float("nan")
            half = float("nan")
        rows.append(SummaryRow(name, mean, half, int(vals.size)))
    return rows
