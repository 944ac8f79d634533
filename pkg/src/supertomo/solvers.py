"""Incremental scaled-gradient solvers: EM, SAEM and SSAEM.

All three fit the template ``x+ = x - lambda D(x) grad f(x) + error`` with
diagonal scaling ``D(x)_jj = x_j / p_j``.  SAEM splits the data terms into
ordered strings, runs an incremental sweep along each string from the
current iterate and averages the string end points.  SSAEM floors the
scaling at ``tau / p_j`` inside the strings and then corrects the small
components so the iterate stays nonnegative.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, fields

import numpy as np

from . import _kernels
from .likelihood import FLOOR_EPS, EmissionObjective, TransmissionObjective
from .projection import SystemMatrix, column_sums
from .tv import tv_value

log = logging.getLogger(__name__)


class NegativityError(RuntimeError):
    """An incremental sweep left the nonnegative orthant."""

    def __init__(self, string: int | None, step: int | None, message: str = ""):
        self.string = string
        self.step = step
        if not message:
            if string is None:
                message = "averaged iterate has negative components"
            else:
                message = f"string {string} went negative after sub-iteration {step}"
        super().__init__(message + "; reduce the stepsize (recalibrate lambda0)")


# ---------------------------------------------------------------- set-up


def starting_image(R: SystemMatrix, b) -> np.ndarray:
    """Uniform image ``phi`` with ``sum(R x0) = sum(b)``."""
    total = float(np.sum(column_sums(R)))
    if total <= 0:
        raise ValueError("system matrix is identically zero")
    return np.full(R.cols, float(np.sum(b)) / total)


def transmission_starting_image(R: SystemMatrix, counts, floor: float = 1e-6) -> np.ndarray:
    """Uniform image matching the summed log attenuation ``ln(beta / (alpha - rho))``."""
    total = float(np.sum(column_sums(R)))
    if total <= 0:
        raise ValueError("system matrix is identically zero")
    net = np.maximum(counts.alpha - counts.rho, 1.0)
    atten = np.log(np.maximum(counts.beta / net, 1.0))
    return np.full(R.cols, max(float(atten.sum()) / total, floor))


def _positive(p):
    p = np.asarray(p, dtype=float).copy()
    # columns no ray touches: any positive value gives a zero update
    p[~(p > 0)] = 1.0
    return p


def emission_scaling(R: SystemMatrix) -> np.ndarray:
    """``p_j = sum_i r_ij``, the scaling that turns SAEM-m into EM."""
    return _positive(column_sums(R))


def transmission_scaling(R: SystemMatrix, counts) -> np.ndarray:
    """``p_j = sum_i r_ij (alpha_i - rho_i)``."""
    return _positive(R.T @ (counts.alpha - counts.rho))


def default_scaling(objective) -> np.ndarray:
    if isinstance(objective, TransmissionObjective):
        return transmission_scaling(objective.R, objective.counts)
    return emission_scaling(objective.R)


@dataclass(frozen=True)
class StringPartition:
    """Ordered strings of data-term indices, disjoint and covering ``0..p-1``."""

    strings: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "strings", tuple(np.asarray(s, dtype=np.intp) for s in self.strings)
        )

    @property
    def s(self) -> int:
        return len(self.strings)

    @property
    def n_terms(self) -> int:
        return int(sum(len(s) for s in self.strings))

    def validate(self, n_terms: int) -> None:
        allidx = np.concatenate(self.strings) if self.strings else np.zeros(0, np.intp)
        if allidx.size != n_terms or not np.array_equal(np.sort(allidx), np.arange(n_terms)):
            raise ValueError("strings must partition the data terms")


def make_strings(p: int, s: int, rng_seed) -> StringPartition:
    """Shuffle ``0..p-1`` and cut it into ``s`` strings of near-equal length."""
    if not 1 <= s <= p:
        raise ValueError(f"need 1 <= s <= p, got s={s}, p={p}")
    perm = np.random.default_rng(rng_seed).permutation(p)
    return StringPartition(tuple(np.array_split(perm, s)))


def view_subsets(R: SystemMatrix, s: int) -> list[np.ndarray]:
    """Group whole views into ``s`` contiguous subsets of near-equal size."""
    geom = R.geometry
    if not 1 <= s <= geom.n_angles:
        raise ValueError(f"need 1 <= s <= n_angles={geom.n_angles}, got {s}")
    views = np.array_split(np.arange(geom.n_angles), s)
    return [
        (v[:, None] * geom.n_rays + np.arange(geom.n_rays)[None, :]).ravel() for v in views
    ]


@dataclass(frozen=True)
class StepSchedule:
    """Diminishing stepsizes.

    ``saem``: ``lambda0 / (k^0.51 / s + 1)``; ``ssaem``:
    ``lambda0 / (k s + 1)^0.25``; ``constant``: ``lambda0``.
    """

    kind: str
    lambda0: float
    s: int = 1

    def __post_init__(self):
        if self.kind not in ("saem", "ssaem", "constant"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if not self.lambda0 > 0:
            raise ValueError("lambda0 must be positive")

    def __call__(self, k):
        k = np.asarray(k, dtype=float)
        if self.kind == "saem":
            out = self.lambda0 / (k**0.51 / self.s + 1.0)
        elif self.kind == "ssaem":
            out = self.lambda0 / (k * self.s + 1.0) ** 0.25
        else:
            out = np.full_like(k, self.lambda0)
        return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- data terms


class DataTerms:
    """The data terms ``f_1..f_p`` an incremental solver steps through.

    With ``blocks=None`` every sinogram row is its own term and sweeps run
    in a compiled kernel; otherwise each term is the sum over one block of
    rows.
    """

    def __init__(self, objective, blocks=None):
        self.objective = objective
        self.blocks = None if blocks is None else [np.asarray(b, dtype=np.intp) for b in blocks]
        if self.blocks is None:
            mat = objective.R.matrix
            self._csr = (mat.indptr, mat.indices, mat.data)
            if isinstance(objective, EmissionObjective):
                self._kind = _kernels.EMISSION
                self._data = (objective.b, objective.b, objective.b)
            elif isinstance(objective, TransmissionObjective):
                self._kind = _kernels.TRANSMISSION
                self._data = (objective.alpha, objective.beta, objective.rho)
            else:
                raise TypeError("per-ray terms need an emission or transmission objective")
            self._eps = getattr(objective, "floor_eps", FLOOR_EPS)
        else:
            self._terms = [objective.restrict(b) for b in self.blocks]

    def __len__(self):
        return self.objective.R.rows if self.blocks is None else len(self.blocks)

    def term_gradient(self, t: int, x) -> np.ndarray:
        rows = [t] if self.blocks is None else self.blocks[t]
        return self.objective.partial_gradient(x, rows)

    def sweep(self, x, order, lam: float, inv_p, tau: float = 0.0,
              floored: bool = False, check: bool = True) -> np.ndarray:
        """Incremental scaled-gradient pass over the terms in ``order``.

        Returns the end point; raises :class:`NegativityError` (``string``
        unset) when ``check`` is on and an intermediate point that would
        scale the next step has a negative component.
        """
        y = np.array(x, dtype=float, copy=True)
        order = np.asarray(order, dtype=np.intp)
        if self.blocks is None:
            a, beta, rho = self._data
            bad = _kernels.ray_sweep(
                *self._csr, order, y, float(lam), inv_p, float(tau), floored, check,
                self._kind, a, beta, rho, self._eps,
            )
            if bad >= 0:
                raise NegativityError(None, int(bad), f"sweep went negative after sub-iteration {bad}")
            return y
        last = len(order) - 1
        for pos, t in enumerate(order):
            g = self._terms[t].gradient(y)
            d = np.where(y > tau, y, tau) if floored else y
            y -= lam * d * inv_p * g
            if check and pos < last and np.any(y < 0):
                raise NegativityError(None, pos, f"sweep went negative after sub-iteration {pos}")
        return y


def _weights(weights, s):
    if weights is None:
        return np.full(s, 1.0 / s)
    w = np.asarray(weights, dtype=float)
    if w.shape != (s,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
        raise ValueError("weights must be nonnegative, one per string, summing to 1")
    return w


# ---------------------------------------------------------------- steps


def em_step(x, objective: EmissionObjective, p=None) -> np.ndarray:
    """Classical multiplicative EM: ``x_j <- x_j / p_j sum_i r_ij b_i / (Rx)_i``."""
    x = np.asarray(x, dtype=float)
    R = objective.R
    colsum = column_sums(R) if p is None else np.asarray(p, dtype=float)
    y = R.matrix @ x
    ratio = np.divide(objective.b, y, out=np.zeros_like(y), where=y > 0)
    update = R.T @ ratio
    return np.where(colsum > 0, x * update / np.where(colsum > 0, colsum, 1.0), x)


def saem_step(x, terms: DataTerms, partition: StringPartition, lam: float, p,
              weights=None, check: bool = True) -> np.ndarray:
    """One SAEM iteration: per-string sweeps from ``x``, then averaging."""
    inv_p = 1.0 / np.asarray(p, dtype=float)
    w = _weights(weights, partition.s)
    out = np.zeros(len(x))
    for l, string in enumerate(partition.strings):
        try:
            y = terms.sweep(x, string, lam, inv_p, check=check)
        except NegativityError as err:
            raise NegativityError(l, err.step) from None
        out += w[l] * y
    if check and np.any(out < 0):
        raise NegativityError(None, None)
    return out


def ssaem_average(x, terms: DataTerms, partition: StringPartition, lam: float, p,
                  tau: float, weights=None) -> np.ndarray:
    """Averaged string end points with the floored scaling (before correction)."""
    inv_p = 1.0 / np.asarray(p, dtype=float)
    w = _weights(weights, partition.s)
    out = np.zeros(len(x))
    for l, string in enumerate(partition.strings):
        out += w[l] * terms.sweep(x, string, lam, inv_p, tau=tau, floored=True, check=False)
    return out


def ssaem_correct(x, x_avg, tau: float) -> np.ndarray:
    """Shrink decreases of components at or below ``tau`` by the factor ``x_j / tau``."""
    x = np.asarray(x, dtype=float)
    mask = (x <= tau) & (x_avg < x)
    return np.where(mask, x + (x / tau) * (x_avg - x), x_avg)


def ssaem_step(x, terms: DataTerms, partition: StringPartition, lam: float, p,
               tau: float = 1e-14, weights=None, project: bool = True) -> np.ndarray:
    """One SSAEM iteration: floored-scaling sweeps, averaging, correction.

    The correction only guards components at or below ``tau``; a larger
    component can still overshoot below zero when ``lam`` is too big for
    it.  With ``project`` such components are set to zero, from where the
    floored scaling lets them grow again.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    out = ssaem_correct(x, ssaem_average(x, terms, partition, lam, p, tau, weights), tau)
    return np.maximum(out, 0.0) if project else out


def dtilde_step(x, g, lam: float, p, tau: float) -> np.ndarray:
    """``x - lam Dtilde(x, g) g`` with the floor applied only where ``g <= 0``."""
    x = np.asarray(x, dtype=float)
    d = np.where((x <= tau) & (g <= 0), tau, x) / np.asarray(p, dtype=float)
    return x - lam * d * g


def calibrate_lambda0(first_step, lo: float = 1e-6, hi: float = 1e6, iters: int = 30) -> float:
    """Largest ``lambda`` in ``[lo, hi]`` whose first iterate is finite and strictly positive.

    ``first_step(lam)`` returns ``x1`` or raises :class:`NegativityError`.
    Feasibility need not be monotone in ``lambda`` (a huge step can
    saturate the transmission exponentials and land on a meaningless
    positive point), so the bracket is the first failure found scanning
    upward from ``lo`` by decades; bisection on ``log(lambda)`` follows.
    """

    def ok(lam):
        try:
            x1 = first_step(lam)
        except NegativityError:
            return False
        return bool(np.all(np.isfinite(x1)) and np.all(x1 > 0))

    if not ok(lo):
        raise ValueError(f"no stepsize in [{lo:g}, {hi:g}] keeps the first iterate positive")
    good = lo
    while True:
        trial = min(good * 10.0, hi)
        if not ok(trial):
            break
        if trial >= hi:
            return hi
        good = trial
    a, b = np.log(good), np.log(trial)
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if ok(np.exp(mid)):
            a = mid
        else:
            b = mid
    return float(np.exp(a))


# ---------------------------------------------------------------- driver


@dataclass
class IterationRecord:
    k: int
    objective: float
    tv: float
    err: float
    time_s: float
    lambda_: float
    sup_norm: float


RECORD_HEADER = ("k", "objective", "tv", "err", "time_s", "lambda", "sup_norm")


@dataclass
class SolverConfig:
    """Algorithm selection and parameters for :func:`run`.

    ``n_strings`` is the SAEM string count, or the SSAEM subset count (SSAEM
    always runs a single string whose subset order is reshuffled every
    iteration).  ``lambda0=None`` calibrates the first stepsize.
    """

    method: str = "em"
    n_strings: int = 1
    lambda0: float | None = None
    tau: float = 1e-14
    threshold: float = 400.0
    max_iters: int = 500
    seed: int = 0
    weights: tuple[float, ...] | None = None
    timing: bool = True

    def __post_init__(self):
        if self.method not in ("em", "saem", "ssaem"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.n_strings < 1:
            raise ValueError("n_strings must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")


@dataclass
class RunResult:
    x: np.ndarray
    records: list[IterationRecord]
    converged: bool
    lambda0: float | None = None
    calibrated: bool = False

    @property
    def iterations(self) -> int:
        return len(self.records)


class Solver:
    """Bundles the data terms, strings and scaling for one objective."""

    def __init__(self, objective, config: SolverConfig, terms: DataTerms | None = None,
                 partition: StringPartition | None = None, p=None):
        self.objective = objective
        self.config = config
        self.p = default_scaling(objective) if p is None else np.asarray(p, dtype=float)
        method = config.method
        if method == "em":
            if not isinstance(objective, EmissionObjective):
                raise ValueError("EM is defined for the emission objective only")
            self.terms = self.partition = None
            return
        if terms is None:
            if method == "ssaem" and objective.R.geometry is not None and config.n_strings <= objective.R.geometry.n_angles:
                terms = DataTerms(objective, view_subsets(objective.R, config.n_strings))
            else:
                terms = DataTerms(objective)
        self.terms = terms
        if partition is None:
            if method == "saem":
                partition = make_strings(len(terms), config.n_strings, config.seed)
            else:
                partition = StringPartition((np.arange(len(terms)),))
        partition.validate(len(terms))
        self.partition = partition

    def partition_at(self, k: int) -> StringPartition:
        if self.config.method != "ssaem":
            return self.partition
        rng = np.random.default_rng([self.config.seed, k])
        return StringPartition(tuple(s[rng.permutation(len(s))] for s in self.partition.strings))

    def step(self, x, k: int, lam: float) -> np.ndarray:
        cfg = self.config
        if cfg.method == "em":
            return em_step(x, self.objective, self.p)
        part = self.partition_at(k)
        if cfg.method == "saem":
            return saem_step(x, self.terms, part, lam, self.p, cfg.weights)
        return ssaem_step(x, self.terms, part, lam, self.p, cfg.tau, cfg.weights)

    def calibrate(self, x0) -> float:
        # huge trial stepsizes overflow the transmission exponentials
        with np.errstate(all="ignore"):
            return calibrate_lambda0(lambda lam: self.step(x0, 0, lam))

    def make_schedule(self, x0) -> tuple[StepSchedule | None, bool]:
        cfg = self.config
        if cfg.method == "em":
            return None, False
        calibrated = cfg.lambda0 is None
        lam0 = self.calibrate(x0) if calibrated else cfg.lambda0
        s = self.partition.s if cfg.method == "saem" else len(self.terms)
        return StepSchedule(cfg.method, lam0, s), calibrated


def run(objective, x0, config: SolverConfig, superiorizer=None, x_true=None,
        solver: Solver | None = None, stop_value=None) -> RunResult:
    """Iterate ``x_half = O(lambda_k, x_k)``, ``x_{k+1} = R_r(x_half)`` until
    ``stop_value(x_k) <= config.threshold`` or ``config.max_iters`` steps.

    ``stop_value`` defaults to the KL distance for emission data and to the
    negative log-likelihood for transmission data.  Returns the last iterate,
    or the iterate with the lowest stopping value and ``converged=False`` when
    the iteration budget runs out.
    """
    solver = Solver(objective, config) if solver is None else solver
    stop_value = objective.stop_value if stop_value is None else stop_value
    x = np.array(x0, dtype=float, copy=True).ravel()
    schedule, calibrated = solver.make_schedule(x)
    if superiorizer is not None and hasattr(superiorizer, "reset"):
        superiorizer.reset()
    x_true = None if x_true is None else np.asarray(x_true, dtype=float).ravel()

    records: list[IterationRecord] = []
    elapsed = 0.0
    k = 0
    value = stop_value(x)
    best_x, best_value = x, value
    while value > config.threshold and k < config.max_iters:
        lam = 1.0 if schedule is None else schedule(k)
        t0 = time.perf_counter()
        x_half = solver.step(x, k, lam)
        if superiorizer is not None:
            x_next = superiorizer(x_half, k)
        else:
            x_next = x_half
        elapsed += time.perf_counter() - t0
        sup_norm = float(np.linalg.norm(x_next - x_half))
        x = x_next
        k += 1
        value = stop_value(x)
        if value < best_value:
            best_x, best_value = x, value
        err = float(np.linalg.norm(x - x_true)) if x_true is not None else float("nan")
        records.append(
            IterationRecord(k, value, tv_value(x), err,
                            elapsed if config.timing else float("nan"), lam, sup_norm)
        )
    converged = value <= config.threshold
    if not converged:
        log.info("stopping rule not met after %d iterations (f=%g)", k, value)
        x = best_x
    return RunResult(x, records, converged,
                     None if schedule is None else schedule.lambda0, calibrated)


def records_to_rows(records) -> list[list]:
    return [[getattr(r, f.name) for f in fields(IterationRecord)] for r in records]
