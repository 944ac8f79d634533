"""Repeated noisy-data reconstruction campaigns and their CSV artifacts.

Layout of a campaign directory::

    config.cfg                 canonical configuration
    phantom.csv                ground truth image
    rep_000/records.csv        per-iteration telemetry
    rep_000/final.bin|csv      final image
    metrics.csv                one row per repetition
    summary.csv                metric, mean, ci99
    error_vs_iteration.csv     k, then one estimation-error column per repetition
    tv_vs_fit.csv              k, then kl_rep_NNN / tv_rep_NNN column pairs
    curves.csv                 k, err, kl, tv, n (means over repetitions alive at k)

Repetition ``r`` uses the seed ``h(master, r)``: the first 64-bit word of
``numpy.random.SeedSequence([master, r])``.  The same seed drives the noise
draw and the string/subset shuffles.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import io
from .config import ConfigError, ExperimentConfig, emit_config, parse_config
from .likelihood import EmissionObjective, TransmissionObjective
from .metrics import mse, ssim, summarize
from .phantom import shepp_logan, simulate_emission, simulate_transmission
from .projection import Geometry, build_system_matrix
from .solvers import (
    RECORD_HEADER,
    NegativityError,
    Solver,
    SolverConfig,
    records_to_rows,
    run,
    starting_image,
    transmission_starting_image,
)
from .superiorize import (
    ProxSuperiorizer,
    StandardSuperiorizer,
    SubgradientSuperiorizer,
    calibrate_gamma0_ratio,
)
from .tv import tv_value

log = logging.getLogger(__name__)

SUMMARY_METRICS = ("kl", "tv", "mse", "ssim", "iterations", "time_s")
METRICS_HEADER = ("rep", "seed", "status", "converged", "lambda0", "gamma0") + SUMMARY_METRICS


def repetition_seed(master: int, rep: int) -> int:
    return int(np.random.SeedSequence([master, rep]).generate_state(1, np.uint64)[0])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    return str(v)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _ragged(columns):
    """Rows ``k, c1[k-1], c2[k-1], ...`` padded with empty cells."""
    n = max((len(c) for c in columns), default=0)
    return [[k + 1] + [c[k] if k < len(c) else None for c in columns] for k in range(n)]


@dataclass
class RepetitionOutcome:
    rep: int
    seed: int
    status: str
    metrics: dict
    records: list
    converged: bool = False
    lambda0: float | None = None
    gamma0: float | None = None
    x: np.ndarray | None = None


@dataclass
class CampaignResult:
    output_dir: Path
    outcomes: list[RepetitionOutcome]

    @property
    def failures(self) -> int:
        return sum(o.status != "ok" for o in self.outcomes)


def geometry_of(cfg: ExperimentConfig) -> Geometry:
    return Geometry(cfg.n_side, cfg.n_angles, cfg.n_rays, cfg.fov_radius)


def _superiorizer(cfg: ExperimentConfig, gamma0, s_eff):
    if cfg.superiorizer == "standard":
        return StandardSuperiorizer(cfg.beta0, cfg.alpha, cfg.sup_n, cfg.ell_mode, cfg.max_trials)
    if cfg.superiorizer == "subgrad":
        return SubgradientSuperiorizer(gamma0, s_eff, cfg.subgrad_n)
    if cfg.superiorizer == "prox":
        return ProxSuperiorizer(gamma0, cfg.prox_max_inner, cfg.prox_tol)
    return None


def run_repetition(cfg: ExperimentConfig, R, x_true, rep: int) -> RepetitionOutcome:
    seed = repetition_seed(cfg.seed, rep)
    if cfg.model == "emission":
        sample = simulate_emission(R, x_true, cfg.snr_db, seed)
        objective = EmissionObjective(R, sample.normalized)
        x0 = starting_image(R, objective.b)
    else:
        counts = simulate_transmission(R, x_true, cfg.blank_level, cfg.dark_level, seed)
        objective = TransmissionObjective(R, counts)
        x0 = transmission_starting_image(R, counts)
    scfg = SolverConfig(cfg.solver, cfg.strings, cfg.lambda0, cfg.tau, cfg.stop_threshold,
                        cfg.max_iters, seed, cfg.weights, cfg.timing)
    outcome = RepetitionOutcome(rep, seed, "ok", {}, [])
    try:
        solver = Solver(objective, scfg)
        schedule, _ = solver.make_schedule(x0)
        if schedule is not None:
            outcome.lambda0 = schedule.lambda0
            solver.config = scfg = replace(scfg, lambda0=schedule.lambda0)
        s_eff = 1 if schedule is None else schedule.s
        gamma0 = cfg.gamma0
        if cfg.superiorizer in ("subgrad", "prox") and gamma0 is None:
            x_half = solver.step(x0, 0, 1.0 if schedule is None else schedule(0))
            gamma0 = calibrate_gamma0_ratio(
                x0, x_half, lambda g: _superiorizer(cfg, g, s_eff),
                refinements=cfg.gamma_refinements,
            )
        outcome.gamma0 = gamma0
        result = run(objective, x0, scfg, _superiorizer(cfg, gamma0, s_eff), x_true, solver)
    except (NegativityError, ValueError, FloatingPointError) as err:
        log.warning("repetition %d failed: %s", rep, err)
        outcome.status = f"failed: {err}"
        return outcome
    outcome.records = result.records
    outcome.converged = result.converged
    outcome.x = result.x
    last = result.records[-1] if result.records else None
    outcome.metrics = {
        "kl": objective.stop_value(result.x),
        "tv": tv_value(result.x),
        "mse": mse(result.x, x_true.ravel()),
        "ssim": ssim(result.x, x_true) if cfg.n_side >= 11 else float("nan"),
        "iterations": float(result.iterations),
        "time_s": last.time_s if last else float("nan"),
    }
    return outcome


def run_campaign(cfg: ExperimentConfig, output_dir=None) -> CampaignResult:
    out = Path(cfg.output_dir if output_dir is None else output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(emit_config(cfg))
    try:
        geom = geometry_of(cfg)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    R = build_system_matrix(geom)
    x_true = shepp_logan(cfg.n_side, cfg.phantom_scale)
    io.write_csv(out / "phantom.csv", x_true)

    outcomes = []
    for rep in range(cfg.repetitions):
        o = run_repetition(cfg, R, x_true, rep)
        rep_dir = out / f"rep_{rep:03d}"
        rep_dir.mkdir(exist_ok=True)
        write_rows(rep_dir / "records.csv", RECORD_HEADER, records_to_rows(o.records))
        if o.status == "ok":
            io.write_binary(rep_dir / "final.bin", o.x)
            io.write_csv(rep_dir / "final.csv", o.x)
        outcomes.append(o)

    write_rows(out / "metrics.csv", METRICS_HEADER, [
        [o.rep, o.seed, o.status, o.converged, o.lambda0, o.gamma0]
        + [o.metrics.get(m, float("nan")) for m in SUMMARY_METRICS]
        for o in outcomes
    ])
    _write_summary(out / "summary.csv", outcomes)
    _write_curves(out, outcomes)
    return CampaignResult(out, outcomes)


def _write_summary(path, outcomes):
    ok = [o.metrics for o in outcomes if o.status == "ok"]
    rows = []
    if len(ok) >= 2:
        rows = [[r.metric, r.mean, r.ci99] for r in summarize(ok)]
    else:
        rows = [[m, ok[0][m] if ok else float("nan"), float("nan")] for m in SUMMARY_METRICS]
    rows.append(["repetitions", float(len(outcomes)), float("nan")])
    rows.append(["failures", float(len(outcomes) - len(ok)), float("nan")])
    write_rows(path, ("metric", "mean", "ci99"), rows)


def _write_curves(out, outcomes):
    ok = [o for o in outcomes if o.status == "ok"]
    labels = [f"rep_{o.rep:03d}" for o in ok]
    err = [[r.err for r in o.records] for o in ok]
    write_rows(out / "error_vs_iteration.csv", ("k", *labels), _ragged(err))
    pairs, header = [], ["k"]
    for label, o in zip(labels, ok):
        pairs += [[r.objective for r in o.records], [r.tv for r in o.records]]
        header += [f"kl_{label}", f"tv_{label}"]
    write_rows(out / "tv_vs_fit.csv", header, _ragged(pairs))

    n = max((len(o.records) for o in ok), default=0)
    rows = []
    for k in range(n):
        alive = [o.records[k] for o in ok if len(o.records) > k]
        rows.append([k + 1,
                     float(np.mean([r.err for r in alive])),
                     float(np.mean([r.objective for r in alive])),
                     float(np.mean([r.tv for r in alive])),
                     len(alive)])
    write_rows(out / "curves.csv", ("k", "err", "kl", "tv", "n"), rows)


def compare(run_dirs) -> tuple[list[str], list[list]]:
    """Merge the mean curves of several campaigns into one table keyed by ``k``."""
    run_dirs = [Path(d) for d in run_dirs]
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    configs = [parse_config(d / "config.cfg") for d in run_dirs]
    ref = configs[0].geometry_key
    for d, c in zip(run_dirs, configs):
        if c.geometry_key != ref:
            raise ValueError(f"geometry of {d} differs from {run_dirs[0]}")
    header, columns, seen = ["k"], [], {}
    for d in run_dirs:
        name = d.name or str(d)
        seen[name] = seen.get(name, 0) + 1
        label = name if seen[name] == 1 else f"{name}#{seen[name]}"
        head, rows = read_rows(d / "curves.csv")
        for col in ("err", "kl", "tv"):
            i = head.index(col)
            header.append(f"{label}:{col}")
            columns.append([row[i] for row in rows])
    return header, _ragged(columns)
