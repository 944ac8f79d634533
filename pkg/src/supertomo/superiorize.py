"""TV superiorization steps applied after each solver iteration.

Each superiorizer maps the solver output ``x_half`` at outer iteration ``k``
to the next iterate; the difference ``x_next - x_half`` is the
superiorization perturbation, which the schedules below drive to zero.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tv import ProxParams, project_nonneg, tv_prox, tv_subgradient, tv_value

log = logging.getLogger(__name__)

MACHINE_EPS = float(np.finfo(float).eps)


def displacement_norm(x_half, x_next) -> float:
    return float(np.linalg.norm(np.ravel(x_next) - np.ravel(x_half)))


def nonascending_direction(x) -> np.ndarray:
    """Unit-norm negative TV subgradient, or zero where the subgradient vanishes."""
    t = tv_subgradient(x)
    nt = np.linalg.norm(t)
    return -t / nt if nt > 0 else np.zeros_like(t)


# ---------------------------------------------------------------- standard


@dataclass
class StandardStepResult:
    x: np.ndarray
    ell: int
    clamped: bool
    trials: int
    accepted: int


def standard_step(x_half, ell: int, n_steps: int, beta0: float = 1.0,
                  alpha: float = 0.95, max_trials: int = 10_000) -> StandardStepResult:
    """Backtracking perturbation along nonascending TV directions.

    Takes ``n_steps`` accepted steps ``z = b + beta0 alpha^ell v``, where the
    counter ``ell`` grows by one on every trial and a trial is accepted when
    ``TV(z) <= TV(x_half)``.  After ``max_trials`` rejections the step is
    taken with zero length (``z = b`` always passes the test).  Negative
    components are clamped to zero at the end, which cannot raise TV.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if beta0 <= 0:
        raise ValueError("beta0 must be positive")
    x_half = np.asarray(x_half, dtype=float)
    b = x_half.copy()
    r_ref = tv_value(x_half)
    trials = 0
    n = 0
    while n < n_steps:
        v = nonascending_direction(b)
        if not np.any(v):
            # z = b is always acceptable; only the counters move
            ell += 1
            trials += 1
            n += 1
            continue
        for attempt in range(1, max_trials + 1):
            ell += 1
            trials += 1
            z = b + (beta0 * alpha**ell) * v
            if tv_value(z) <= r_ref:
                b = z
                break
        else:
            log.debug("no acceptable step after %d trials; taking a zero step", max_trials)
        n += 1
    clamped = bool(np.any(b < 0))
    if clamped:
        b = project_nonneg(b)
    return StandardStepResult(b, ell, clamped, trials, n)


class StandardSuperiorizer:
    """Standard superiorization with counter ``ell``.

    ``ell_mode="iteration"`` restarts the counter at the outer iteration index
    ``k`` on every call; ``"persistent"`` carries it over between calls.
    """

    def __init__(self, beta0: float = 1.0, alpha: float = 0.95, n_steps: int = 10,
                 ell_mode: str = "iteration", max_trials: int = 10_000):
        if ell_mode not in ("iteration", "persistent"):
            raise ValueError(f"unknown ell_mode {ell_mode!r}")
        if not 0 < alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        self.beta0 = beta0
        self.alpha = alpha
        self.n_steps = n_steps
        self.ell_mode = ell_mode
        self.max_trials = max_trials
        self.reset()

    def reset(self):
        self.ell = 0
        self.clamp_count = 0

    def __call__(self, x_half, k: int) -> np.ndarray:
        start = k if self.ell_mode == "iteration" else self.ell
        res = standard_step(x_half, start, self.n_steps, self.beta0, self.alpha, self.max_trials)
        self.ell = res.ell
        if res.clamped:
            self.clamp_count += 1
            log.debug("standard superiorization clamped negatives at k=%d", k)
        return res.x


# ---------------------------------------------------------------- subgradient


def subgrad_step(x_half, gamma: float, n_steps: int = 50) -> np.ndarray:
    """``n_steps`` TV subgradient steps of length ``gamma / i``, then projection."""
    y = np.array(x_half, dtype=float, copy=True)
    for i in range(1, n_steps + 1):
        y -= (gamma / i) * tv_subgradient(y)
    return project_nonneg(y)


class SubgradientSuperiorizer:
    """Projected-subgradient superiorization, ``gamma_k = gamma0 / (k s + 1)^0.35``."""

    def __init__(self, gamma0: float, s: int = 1, n_steps: int = 50, exponent: float = 0.35):
        if not gamma0 > 0:
            raise ValueError("gamma0 must be positive")
        self.gamma0 = gamma0
        self.s = s
        self.n_steps = n_steps
        self.exponent = exponent

    def gamma(self, k):
        return self.gamma0 / (np.asarray(k, dtype=float) * self.s + 1.0) ** self.exponent

    def __call__(self, x_half, k: int) -> np.ndarray:
        return subgrad_step(x_half, float(self.gamma(k)), self.n_steps)


# ---------------------------------------------------------------- proximal


def prox_step(x_half, gamma: float, max_inner_iters: int = 100,
              dual_tolerance: float = 1e-8) -> tuple[np.ndarray, bool]:
    res = tv_prox(x_half, ProxParams(gamma, max_inner_iters, dual_tolerance), full_output=True)
    return res.x, res.converged


class ProxSuperiorizer:
    """FGP proximal superiorization, ``gamma_k = gamma0 / (k + 1)^(1 + eps)``."""

    def __init__(self, gamma0: float, max_inner_iters: int = 100, dual_tolerance: float = 1e-8):
        if not gamma0 > 0:
            raise ValueError("gamma0 must be positive")
        self.gamma0 = gamma0
        self.max_inner_iters = max_inner_iters
        self.dual_tolerance = dual_tolerance
        self.reset()

    def reset(self):
        self.unconverged = 0

    def gamma(self, k):
        return self.gamma0 / (np.asarray(k, dtype=float) + 1.0) ** (1.0 + MACHINE_EPS)

    def __call__(self, x_half, k: int) -> np.ndarray:
        x, ok = prox_step(x_half, float(self.gamma(k)), self.max_inner_iters, self.dual_tolerance)
        if not ok:
            self.unconverged += 1
            log.debug("TV prox hit its inner-iteration budget at k=%d", k)
        return x


class IdentitySuperiorizer:
    def __call__(self, x_half, k: int) -> np.ndarray:
        return np.array(x_half, dtype=float, copy=True)


# ---------------------------------------------------------------- calibration


def calibrate_gamma0_ratio(x0, x_half, make_superiorizer, target: float = 1e-2,
                           trial: float = 1.0, refinements: int = 0) -> float:
    """Scale ``gamma0`` so that ``||x_half - x1|| / ||x0 - x_half|| ~ target``.

    A trial superiorizer built with ``gamma0 = trial`` is applied to the first
    solver output ``x_half``; ``gamma0`` is then rescaled by the ratio of the
    target to the observed displacement ratio.  Each refinement repeats the
    rescaling starting from the previous answer, which matters when the
    displacement is not proportional to ``gamma0``.
    """
    d0 = displacement_norm(x0, x_half)
    if d0 == 0:
        raise ValueError("solver step did not move the iterate")
    gamma = float(trial)
    for _ in range(refinements + 1):
        x1 = make_superiorizer(gamma)(x_half, 0)
        d1 = displacement_norm(x_half, x1)
        if d1 == 0:
            raise ValueError("trial superiorization step did not move the iterate")
        gamma *= target * d0 / d1
    return gamma
