"""Poisson negative log-likelihoods for emission and transmission data.

Both objectives are sums of per-ray terms, so they also expose partial
gradients over an arbitrary subset of rows, which the incremental
solvers use as their data terms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phantom import TransmissionCounts
from .projection import SystemMatrix

# Keeps log and division finite on rays whose projection vanishes.
FLOOR_EPS = 1e-300


def _rows(R: SystemMatrix, subset):
    idx = np.asarray(subset, dtype=np.intp).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= R.rows):
        raise IndexError(f"row index out of range [0, {R.rows})")
    return idx


def _xlogx(b):
    out = np.zeros_like(b)
    pos = b > 0
    out[pos] = b[pos] * np.log(b[pos])
    return out


@dataclass(frozen=True)
class EmissionObjective:
    """``L_E(x) = sum_i (Rx)_i - b_i ln (Rx)_i``."""

    R: SystemMatrix
    b: np.ndarray
    floor_eps: float = FLOOR_EPS

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).ravel()
        if b.size != self.R.rows:
            raise ValueError(f"data has {b.size} entries, matrix has {self.R.rows} rows")
        if self.floor_eps <= 0:
            raise ValueError("floor_eps must be positive")
        object.__setattr__(self, "b", b)

    def value(self, x) -> float:
        y = self.R.matrix @ np.ravel(x)
        return float(np.sum(y - self.b * np.log(np.maximum(y, self.floor_eps))))

    def offset(self) -> float:
        """``L_E`` at a perfect fit ``Rx = b``: ``sum_i b_i - b_i ln b_i``."""
        return float(np.sum(self.b - _xlogx(self.b)))

    def kl(self, x) -> float:
        """Generalized Kullback-Leibler distance ``KL(b, Rx) = L_E(x) - offset``."""
        y = np.maximum(self.R.matrix @ np.ravel(x), self.floor_eps)
        return float(np.sum(_xlogx(self.b) - self.b * np.log(y) + y - self.b))

    def _ray_factor(self, y, b):
        return 1.0 - b / np.maximum(y, self.floor_eps)

    def gradient(self, x) -> np.ndarray:
        y = self.R.matrix @ np.ravel(x)
        return self.R.T @ self._ray_factor(y, self.b)

    def partial_gradient(self, x, subset) -> np.ndarray:
        idx = _rows(self.R, subset)
        return self.block_gradient(self.R.restrict_rows(idx), idx, np.ravel(x))

    def restrict(self, subset) -> "BlockTerm":
        idx = _rows(self.R, subset)
        return BlockTerm(self.R.restrict_rows(idx), self, idx)

    def stop_value(self, x) -> float:
        return self.kl(x)

    def block_gradient(self, sub, idx, x):
        return sub.T @ self._ray_factor(sub @ x, self.b[idx])


@dataclass(frozen=True)
class TransmissionObjective:
    """``L_TR(x) = sum_i beta_i e^{-(Rx)_i} - alpha_i ln(beta_i e^{-(Rx)_i} + rho_i)``.

    The blank count ``beta_i`` appears inside the logarithm, which makes the
    per-subset gradient ``sum_i r_ij beta_i e^{-(Rx)_i} (alpha_i / (beta_i
    e^{-(Rx)_i} + rho_i) - 1)`` the exact derivative.
    """

    R: SystemMatrix
    counts: TransmissionCounts
    floor_eps: float = FLOOR_EPS

    def __post_init__(self):
        if self.counts.alpha.size != self.R.rows:
            raise ValueError("count vectors must have one entry per matrix row")

    @property
    def alpha(self):
        return self.counts.alpha

    @property
    def beta(self):
        return self.counts.beta

    @property
    def rho(self):
        return self.counts.rho

    def value(self, x) -> float:
        y = self.R.matrix @ np.ravel(x)
        expected = self.beta * np.exp(-y)
        return float(
            np.sum(expected - self.alpha * np.log(np.maximum(expected + self.rho, self.floor_eps)))
        )

    def _ray_factor(self, y, alpha, beta, rho):
        expected = beta * np.exp(-y)
        return expected * (alpha / np.maximum(expected + rho, self.floor_eps) - 1.0)

    def gradient(self, x) -> np.ndarray:
        y = self.R.matrix @ np.ravel(x)
        return self.R.T @ self._ray_factor(y, self.alpha, self.beta, self.rho)

    def partial_gradient(self, x, subset) -> np.ndarray:
        idx = _rows(self.R, subset)
        sub = self.R.restrict_rows(idx)
        return self.block_gradient(sub, idx, np.ravel(x))

    def block_gradient(self, sub, idx, x):
        y = sub @ x
        return sub.T @ self._ray_factor(y, self.alpha[idx], self.beta[idx], self.rho[idx])

    def restrict(self, subset) -> "BlockTerm":
        idx = _rows(self.R, subset)
        return BlockTerm(self.R.restrict_rows(idx), self, idx)

    def offset(self) -> float:
        """``L_TR`` at a perfect fit, less the dark counts: ``sum_i alpha_i - alpha_i ln alpha_i - rho_i``."""
        return float(np.sum(self.alpha - _xlogx(self.alpha) - self.rho))

    def kl(self, x) -> float:
        """Poisson deviance ``KL(alpha, beta e^{-Rx} + rho)``, zero at a perfect fit."""
        return self.value(x) - self.offset()

    def stop_value(self, x) -> float:
        return self.kl(x)


class BlockTerm:
    """A data term ``F_l = sum_{i in S_l} f_i`` with its row block cached."""

    __slots__ = ("matrix", "objective", "rows")

    def __init__(self, matrix, objective, rows):
        self.matrix = matrix
        self.objective = objective
        self.rows = rows

    def gradient(self, x) -> np.ndarray:
        return self.objective.block_gradient(self.matrix, self.rows, x)
