"""Shepp-Logan phantom and Poisson data simulation.

Random numbers come from numpy's ``Generator`` over PCG64 (64-bit state),
whose Poisson sampler uses inversion for means below 10 and the PTRS
transformed-rejection method above, so a seed fully determines the data.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .projection import SystemMatrix, forward


@dataclass(frozen=True)
class EllipseSpec:
    center: tuple[float, float]
    axes: tuple[float, float]
    angle_deg: float
    intensity: float

    def __post_init__(self):
        if self.axes[0] <= 0 or self.axes[1] <= 0:
            raise ValueError("ellipse semi-axes must be positive")

    def contains(self, x, y):
        phi = np.deg2rad(self.angle_deg)
        xr, yr = x - self.center[0], y - self.center[1]
        u = xr * np.cos(phi) + yr * np.sin(phi)
        v = -xr * np.sin(phi) + yr * np.cos(phi)
        return (u / self.axes[0]) ** 2 + (v / self.axes[1]) ** 2 <= 1.0


# Ten-ellipse Shepp-Logan table with the higher-contrast "modified"
# intensities (Toft).  Coordinates are relative to the field of view.
MODIFIED_SHEPP_LOGAN = (
    EllipseSpec((0.0, 0.0), (0.69, 0.92), 0.0, 1.0),
    EllipseSpec((0.0, -0.0184), (0.6624, 0.874), 0.0, -0.8),
    EllipseSpec((0.22, 0.0), (0.11, 0.31), -18.0, -0.2),
    EllipseSpec((-0.22, 0.0), (0.16, 0.41), 18.0, -0.2),
    EllipseSpec((0.0, 0.35), (0.21, 0.25), 0.0, 0.1),
    EllipseSpec((0.0, 0.1), (0.046, 0.046), 0.0, 0.1),
    EllipseSpec((0.0, -0.1), (0.046, 0.046), 0.0, 0.1),
    EllipseSpec((-0.08, -0.605), (0.046, 0.023), 0.0, 0.1),
    EllipseSpec((0.0, -0.606), (0.023, 0.023), 0.0, 0.1),
    EllipseSpec((0.06, -0.605), (0.023, 0.046), 0.0, 0.1),
)


def pixel_centers(n_side: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (x, y) pixel-centre coordinates in ``[-1, 1]``, row-major."""
    c = -1.0 + (np.arange(n_side) + 0.5) * (2.0 / n_side)
    x, y = np.meshgrid(c, -c)
    return x, y


def shepp_logan(n_side: int, scale: float = 1.0, ellipses=MODIFIED_SHEPP_LOGAN) -> np.ndarray:
    """Modified Shepp-Logan phantom as an ``(n_side, n_side)`` array."""
    if n_side < 1:
        raise ValueError("n_side must be >= 1")
    x, y = pixel_centers(n_side)
    img = np.zeros((n_side, n_side))
    for e in ellipses:
        img[e.contains(x, y)] += e.intensity
    # the table is nonnegative in exact arithmetic; clear rounding residue
    img[img < 1e-12] = 0.0
    return scale * img


class EmissionSample(NamedTuple):
    counts: np.ndarray
    scale: float

    @property
    def normalized(self) -> np.ndarray:
        """Counts divided by the scale, i.e. an estimate of ``R x_true``."""
        return self.counts / self.scale


def snr_db(signal, noisy) -> float:
    signal = np.asarray(signal, dtype=float)
    noise = np.asarray(noisy, dtype=float) - signal
    return 10.0 * np.log10(signal @ signal / (noise @ noise))


def emission_scale(projection, snr_db: float) -> float:
    """Count scale ``c`` whose expected SNR equals ``snr_db``.

    For ``b ~ Poisson(c y)`` we have ``E||b/c - y||^2 = sum(y) / c``, so the
    expected SNR is ``10 log10(c ||y||^2 / sum(y))``.
    """
    y = np.asarray(projection, dtype=float)
    power = y @ y
    if power <= 0:
        raise ValueError("projection is identically zero; SNR is unattainable")
    return 10.0 ** (snr_db / 10.0) * y.sum() / power


def simulate_emission(R: SystemMatrix, x_true, snr_db: float, rng_seed) -> EmissionSample:
    """Draw ``b ~ Poisson(c R x_true)`` with ``c`` set by the requested SNR.

    An all-zero ``x_true`` returns zero counts with unit scale.
    """
    x_true = np.asarray(x_true, dtype=float)
    if np.any(x_true < 0):
        raise ValueError("x_true must be nonnegative")
    y = forward(R, x_true)
    if not np.any(y > 0):
        if np.any(x_true > 0):
            raise ValueError("phantom projects to zero; SNR is unattainable")
        return EmissionSample(np.zeros_like(y), 1.0)
    c = emission_scale(y, snr_db)
    rng = np.random.default_rng(rng_seed)
    return EmissionSample(rng.poisson(c * y).astype(float), c)


@dataclass(frozen=True)
class TransmissionCounts:
    alpha: np.ndarray
    beta: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        if not (self.alpha.shape == self.beta.shape == self.rho.shape):
            raise ValueError("alpha, beta and rho must have equal lengths")
        if np.any(self.beta <= 0):
            raise ValueError("blank counts beta must be positive")
        if np.any(self.alpha < 0) or np.any(self.rho < 0):
            raise ValueError("counts must be nonnegative")


def transmission_mean(R: SystemMatrix, x, beta, rho) -> np.ndarray:
    return beta * np.exp(-forward(R, x)) + rho


def simulate_transmission(
    R: SystemMatrix, x_true, blank_level: float, dark_level: float, rng_seed
) -> TransmissionCounts:
    """Draw ``alpha ~ Poisson(beta exp(-R x) + rho)`` with constant beta, rho."""
    if not blank_level > 0:
        raise ValueError("blank_level must be positive")
    if dark_level < 0:
        raise ValueError("dark_level must be nonnegative")
    x_true = np.asarray(x_true, dtype=float)
    if np.any(x_true < 0):
        raise ValueError("x_true must be nonnegative")
    beta = np.full(R.rows, float(blank_level))
    rho = np.full(R.rows, float(dark_level))
    rng = np.random.default_rng(rng_seed)
    alpha = rng.poisson(transmission_mean(R, x_true, beta, rho)).astype(float)
    return TransmissionCounts(alpha, beta, rho)
