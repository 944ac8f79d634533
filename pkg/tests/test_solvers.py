import logging
import math
import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from supertomo.likelihood import EmissionObjective, TransmissionObjective
from supertomo.phantom import TransmissionCounts, shepp_logan, simulate_emission, transmission_mean
from supertomo.projection import Geometry, SystemMatrix, build_system_matrix, column_sums, forward
from supertomo.solvers import (
    DataTerms, NegativityError, Solver, SolverConfig, StepSchedule, StringPartition,
    calibrate_lambda0, dtilde_step, em_step, emission_scaling, make_strings, run,
    saem_step, ssaem_step, starting_image, transmission_scaling, view_subsets,
)
from supertomo.superiorize import IdentitySuperiorizer

log = logging.getLogger(__name__)


def raw(values):
    return SystemMatrix(sp.csr_matrix(np.atleast_2d(np.asarray(values, dtype=float))), None)


def emission_instance(seed, n_side=4, n_angles=3, n_rays=7, consistent=False):
    R = build_system_matrix(Geometry(n_side, n_angles, n_rays))
    r = np.random.default_rng(seed)
    truth = r.uniform(0.5, 2.0, R.cols)
    y = forward(R, truth)
    b = y if consistent else r.poisson(y).astype(float)
    return EmissionObjective(R, b), truth


# ---------------------------------------------------------------- set-up


def test_starting_image():
    R = build_system_matrix(Geometry(8, 4, 11))
    assert not np.any(starting_image(R, np.zeros(R.rows)))
    np.testing.assert_allclose(starting_image(raw([[2.0]]), [4.0]), [2.0])
    R128 = build_system_matrix(Geometry(128, 32, 182))
    b = simulate_emission(R128, shepp_logan(128), 18, 0).normalized
    x0 = starting_image(R128, b)
    assert np.ptp(x0) == 0
    assert forward(R128, x0).sum() == pytest.approx(b.sum(), rel=1e-10)
    with pytest.raises(ValueError):
        starting_image(SystemMatrix(sp.csr_matrix((2, 3)), None), np.ones(2))


def test_make_strings():
    one = make_strings(9, 1, 0)
    assert one.s == 1 and sorted(one.strings[0]) == list(range(9))
    singles = make_strings(9, 9, 0)
    assert all(len(s) == 1 for s in singles.strings)
    part = make_strings(10, 3, 42)
    assert sorted(len(s) for s in part.strings) == [3, 3, 4]
    seen = [i for s in part.strings for i in s]
    assert sorted(seen) == list(range(10)) and len(set(seen)) == 10
    again = make_strings(10, 3, 42)
    assert all(np.array_equal(a, b) for a, b in zip(part.strings, again.strings))
    for bad in (0, 11):
        with pytest.raises(ValueError):
            make_strings(10, bad, 0)
    with pytest.raises(ValueError):
        StringPartition((np.array([0, 1]), np.array([1, 2]))).validate(3)


@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 10**6))
def test_make_strings_partition(p, s, seed):
    if s > p:
        return
    part = make_strings(p, s, seed)
    part.validate(p)
    sizes = [len(x) for x in part.strings]
    assert max(sizes) - min(sizes) <= 1


def test_view_subsets_partition():
    R = build_system_matrix(Geometry(8, 6, 5))
    subs = view_subsets(R, 4)
    allrows = np.concatenate(subs)
    assert sorted(allrows) == list(range(R.rows))
    for s in subs:
        assert len(s) % 5 == 0
    with pytest.raises(ValueError):
        view_subsets(R, 7)


def test_scalings_positive():
    obj, _ = emission_instance(0)
    p = emission_scaling(obj.R)
    assert np.all(p > 0)
    dense = obj.R.toarray().sum(axis=0)
    np.testing.assert_allclose(p[dense > 0], dense[dense > 0])


# ---------------------------------------------------------------- schedules


def test_step_schedules():
    k = np.arange(0, 10**6 + 1, dtype=float)
    for kind in ("saem", "ssaem"):
        sched = StepSchedule(kind, 3.0, 4)
        lam = sched(k)
        assert np.all(lam > 0) and np.all(np.diff(lam) <= 0)
        assert lam[-1] < lam[0]
        growth = lam[1:] * k[1:] ** 0.6
        # decays slower than 1/k: lambda_k k^0.6 keeps growing
        assert growth[-1] > 10 * growth[0] and np.all(np.diff(growth[-1000:]) > 0)
    assert StepSchedule("saem", 2.0, 3)(0) == 2.0
    assert StepSchedule("saem", 2.0, 3)(8) == pytest.approx(2.0 / (8**0.51 / 3 + 1))
    assert StepSchedule("ssaem", 2.0, 3)(8) == pytest.approx(2.0 / 25**0.25)
    assert StepSchedule("constant", 2.0)(100) == 2.0
    with pytest.raises(ValueError):
        StepSchedule("saem", 0.0)
    with pytest.raises(ValueError):
        StepSchedule("cosine", 1.0)


# ---------------------------------------------------------------- EM


def test_em_fixed_point_and_zero_data():
    obj, truth = emission_instance(1, consistent=True)
    np.testing.assert_allclose(em_step(truth, obj), truth, rtol=1e-12)
    zero = EmissionObjective(obj.R, np.zeros(obj.R.rows))
    assert not np.any(em_step(truth, zero))


def test_em_monotone():
    for seed in range(100):
        obj, _ = emission_instance(seed)
        x = np.random.default_rng(seed).uniform(0.2, 3.0, obj.R.cols)
        for _ in range(3):
            x_next = em_step(x, obj)
            assert np.all(x_next >= 0)
            assert obj.value(x_next) <= obj.value(x) + 1e-10 * abs(obj.value(x))
            x = x_next


# ---------------------------------------------------------------- SAEM


def test_saem_zero_gradient_is_fixed():
    obj, truth = emission_instance(2, consistent=True)
    terms = DataTerms(obj)
    part = make_strings(obj.R.rows, 3, 0)
    out = saem_step(truth, terms, part, 0.7, emission_scaling(obj.R))
    np.testing.assert_allclose(out, truth, rtol=1e-12)


def test_saem_single_string_hand_sweep():
    A = np.array([[1.0, 0.5], [0.25, 2.0], [0.0, 1.5]])
    R = raw(A)
    b = np.array([2.0, 3.0, 1.0])
    obj = EmissionObjective(R, b)
    x = np.array([1.0, 0.8])
    p = A.sum(axis=0)
    lam = 0.3
    order = [2, 0, 1]
    y = x.copy()
    for i in order:
        y = y - lam * (y / p) * A[i] * (1 - b[i] / (A[i] @ y))
    out = saem_step(x, DataTerms(obj), StringPartition((np.array(order),)), lam, p)
    np.testing.assert_allclose(out, y, rtol=1e-14)
    blocks = DataTerms(obj, [np.array([0, 1]), np.array([2])])
    yb = x - lam * (x / p) * obj.partial_gradient(x, [2])
    yb = yb - lam * (yb / p) * obj.partial_gradient(yb, [0, 1])
    np.testing.assert_allclose(
        saem_step(x, blocks, StringPartition((np.array([1, 0]),)), lam, p), yb, rtol=1e-14)


def em_correspondence_error(scale):
    R = build_system_matrix(Geometry(4, 4, 6))
    r = np.random.default_rng(7)
    x = scale * r.uniform(0.5, 1.5, 16)
    b = r.poisson(forward(R, r.uniform(0.5, 1.5, 16)) * 5).astype(float) * scale / 5
    obj = EmissionObjective(R, b)
    m = R.rows
    p = column_sums(R)
    saem = saem_step(x, DataTerms(obj), make_strings(m, m, 0), float(m), emission_scaling(R),
                     weights=np.full(m, 1.0 / m))
    y = forward(R, x)
    em = (x / np.where(p > 0, p, 1)) * (R.T @ np.divide(b, y, out=np.zeros_like(y), where=y > 0))
    em = np.where(p > 0, em, x)
    return float(np.max(np.abs(saem - em) / np.abs(em)))


def test_saem_em_correspondence():
    errs = [em_correspondence_error(s) for s in (1.0, 0.1, 0.01)]
    for e in errs:
        assert e <= 0.05
    for a, b in zip(errs, errs[1:]):
        assert b <= max(a, 1e-12)


def test_saem_weight_permutation():
    obj, _ = emission_instance(3)
    terms = DataTerms(obj)
    part = make_strings(obj.R.rows, 3, 5)
    w = np.array([0.5, 0.2, 0.3])
    p = emission_scaling(obj.R)
    x = np.full(obj.R.cols, 1.0)
    a = saem_step(x, terms, part, 0.2, p, weights=w)
    perm = [2, 0, 1]
    b = saem_step(x, terms, StringPartition(tuple(part.strings[i] for i in perm)), 0.2, p,
                  weights=w[perm])
    np.testing.assert_allclose(a, b, rtol=1e-14)
    with pytest.raises(ValueError):
        saem_step(x, terms, part, 0.2, p, weights=[0.5, 0.5, 0.5])


def test_saem_negativity_is_an_error():
    obj, _ = emission_instance(4)
    obj = EmissionObjective(obj.R, np.zeros(obj.R.rows))
    terms = DataTerms(obj)
    part = make_strings(obj.R.rows, 2, 0)
    with pytest.raises(NegativityError) as info:
        saem_step(np.ones(obj.R.cols), terms, part, 50.0, emission_scaling(obj.R))
    assert info.value.string in (0, 1) and info.value.step is not None
    assert "string" in str(info.value)


# ---------------------------------------------------------------- calibration


def test_calibration_em_equivalent():
    A = np.array([[1.0, 0.5], [0.3, 1.0]])
    R = raw(A)
    truth = np.array([2.0, 1.0])
    obj = EmissionObjective(R, A @ truth)
    m = 2
    solver = Solver(obj, SolverConfig("saem", m), partition=StringPartition((np.array([0]), np.array([1]))))
    lam0 = solver.calibrate(np.array([0.5, 3.0]))
    assert lam0 >= m


def test_calibration_zero_gradient_hits_bound():
    obj, truth = emission_instance(5, consistent=True)
    solver = Solver(obj, SolverConfig("saem", 2))
    assert solver.calibrate(truth) == 1e6


def test_calibration_post_conditions():
    for seed in range(5):
        obj, _ = emission_instance(seed, n_side=6, n_angles=4, n_rays=9)
        solver = Solver(obj, SolverConfig("saem", 3, seed=seed))
        x0 = starting_image(obj.R, obj.b)
        lam0 = solver.calibrate(x0)
        assert np.all(solver.step(x0, 0, lam0) > 0)
        with pytest.raises(NegativityError):
            x1 = solver.step(x0, 0, 2 * lam0)
            if not np.all(x1 > 0):
                raise NegativityError(None, None)


def test_calibration_failure():
    def never(lam):
        raise NegativityError(0, 0)
    with pytest.raises(ValueError):
        calibrate_lambda0(never)


# ---------------------------------------------------------------- SSAEM


def test_ssaem_matches_saem_when_floor_inactive():
    obj, _ = emission_instance(6)
    terms = DataTerms(obj)
    part = make_strings(obj.R.rows, 3, 1)
    p = emission_scaling(obj.R)
    x = np.random.default_rng(0).uniform(0.5, 2.0, obj.R.cols)
    a = saem_step(x, terms, part, 0.05, p)
    b = ssaem_step(x, terms, part, 0.05, p, tau=1e-14)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_ssaem_escapes_zero():
    R = raw([[1.0, 1.0]])
    obj = EmissionObjective(R, np.array([4.0]))
    x = np.array([0.0, 1.0])
    assert obj.gradient(x)[0] < 0
    out = ssaem_step(x, DataTerms(obj), StringPartition((np.array([0]),)), 0.5, np.ones(2), tau=1e-3)
    assert out[0] > 0 and out[1] > 1.0


def test_ssaem_projects_overshoot_to_zero():
    # one datum, b = 0: the step is x (1 - lam r / p), negative for lam > p / r
    obj = EmissionObjective(raw([[1.0, 1.0]]), np.zeros(1))
    x = np.array([0.5, 2.0])
    args = (x, DataTerms(obj), StringPartition((np.array([0]),)), 3.0, np.ones(2))
    np.testing.assert_allclose(ssaem_step(*args, project=False), -2 * x)
    np.testing.assert_array_equal(ssaem_step(*args), np.zeros(2))
    regrown = ssaem_step(np.zeros(2), DataTerms(EmissionObjective(raw([[1.0, 1.0]]), np.ones(1))),
                         StringPartition((np.array([0]),)), 0.5, np.ones(2), tau=1e-3)
    assert np.all(regrown > 0)


def test_dtilde_closed_form():
    r = np.random.default_rng(8)
    for trial in range(20):
        obj, _ = emission_instance(trial, n_side=5, n_angles=4, n_rays=8)
        m = obj.R.rows
        tau = 1e-3
        while True:
            x = r.uniform(0, 2, obj.R.cols)
            x[r.random(obj.R.cols) < 0.3] = 0.0
            x[r.random(obj.R.cols) < 0.2] = tau / 2
            y = forward(obj.R, x)
            if np.all(y[obj.b > 0] > 1e-2):
                break
        p = emission_scaling(obj.R)
        lam = r.uniform(0.01, 0.5)
        w = r.dirichlet(np.ones(m))
        part = StringPartition(tuple(np.array([i]) for i in range(m)))
        out = ssaem_step(x, DataTerms(obj), part, lam, p, tau=tau, weights=w, project=False)
        g = sum(w[i] * obj.partial_gradient(x, [i]) for i in range(m))
        expected = dtilde_step(x, g, lam, p, tau)
        assert np.max(np.abs(out - expected)) <= 1e-12 * max(1.0, np.max(np.abs(x)))


def test_ssaem_string_is_second_order():
    obj, _ = emission_instance(9, n_side=5, n_angles=4, n_rays=8)
    x = np.random.default_rng(1).uniform(0.5, 1.5, obj.R.cols)
    x[3] = 0.0
    tau = 1e-2
    p = emission_scaling(obj.R)
    inv_p = 1 / p
    string = np.arange(0, obj.R.rows, 4)
    terms = DataTerms(obj)
    grad = obj.partial_gradient(x, string)
    dbar = np.where(x > tau, x, tau) * inv_p
    ratios = []
    for lam in (1e-2, 1e-3, 1e-4):
        s = terms.sweep(x, string, lam, inv_p, tau=tau, floored=True, check=False)
        ratios.append(np.linalg.norm(s - (x - lam * dbar * grad)) / lam**2)
    assert max(ratios) < 10 * min(ratios)
    assert min(ratios) > 0


def test_ssaem_transmission_nonnegative():
    R = build_system_matrix(Geometry(8, 6, 11))
    r = np.random.default_rng(0)
    truth = r.uniform(0, 0.2, 64)
    beta, rho = np.full(R.rows, 500.0), np.full(R.rows, 2.0)
    counts = TransmissionCounts(r.poisson(transmission_mean(R, truth, beta, rho)).astype(float), beta, rho)
    obj = TransmissionObjective(R, counts)
    cfg = SolverConfig("ssaem", 3, threshold=-np.inf, max_iters=15, seed=1)
    res = run(obj, np.full(64, 0.05), cfg)
    # huge steps saturate exp(-Rx) into a positive but useless point; the
    # calibration must stop at the first infeasible decade instead
    assert res.lambda0 < 1e3
    assert res.iterations == 15 and not res.converged
    assert all(np.all(np.isfinite([rec.objective, rec.tv])) for rec in res.records)
    assert np.all(res.x >= 0)
    assert res.records[-1].objective < obj.kl(np.full(64, 0.05))
    assert np.all(transmission_scaling(R, counts) > 0)


# ---------------------------------------------------------------- driver


def test_identity_superiorizer_matches_none():
    obj, truth = emission_instance(10, n_side=8, n_angles=4, n_rays=11)
    x0 = starting_image(obj.R, obj.b)
    for method, s in (("em", 1), ("saem", 3), ("ssaem", 2)):
        cfg = SolverConfig(method, s, threshold=-np.inf, max_iters=6, seed=3, timing=False)
        a = run(obj, x0, cfg, None, truth)
        b = run(obj, x0, cfg, IdentitySuperiorizer(), truth)
        np.testing.assert_array_equal(a.x, b.x)
        assert [r.objective for r in a.records] == [r.objective for r in b.records]
        assert all(r.sup_norm == 0 for r in b.records)


def test_infinite_threshold_runs_budget():
    obj, truth = emission_instance(11)
    cfg = SolverConfig("em", threshold=-np.inf, max_iters=7)
    res = run(obj, starting_image(obj.R, obj.b), cfg, x_true=truth)
    assert res.iterations == 7 and not res.converged
    assert [r.k for r in res.records] == list(range(1, 8))
    times = [r.time_s for r in res.records]
    assert all(t >= 0 for t in times) and times == sorted(times)
    quiet = run(obj, starting_image(obj.R, obj.b), SolverConfig("em", threshold=-np.inf, max_iters=2, timing=False))
    assert all(math.isnan(r.time_s) for r in quiet.records)
    assert all(math.isnan(r.err) for r in quiet.records)


def test_em_desk_run_reaches_threshold():
    R = build_system_matrix(Geometry(64, 32, 91))
    truth = shepp_logan(64)
    b = simulate_emission(R, truth, 18, 0).normalized
    obj = EmissionObjective(R, b)
    # 64x64 with half as many rays per view: the 400 threshold scales to 200
    res = run(obj, starting_image(R, b), SolverConfig("em", threshold=200.0), x_true=truth)
    assert res.converged and res.iterations < 100
    kl = [r.objective for r in res.records]
    assert all(a >= b for a, b in zip(kl, kl[1:]))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig("osem")
    with pytest.raises(ValueError):
        SolverConfig("saem", 0)
    obj, _ = emission_instance(0)
    R = obj.R
    counts = TransmissionCounts(np.ones(R.rows), np.ones(R.rows) * 5, np.zeros(R.rows))
    with pytest.raises(ValueError):
        Solver(TransmissionObjective(R, counts), SolverConfig("em"))


@given(st.integers(0, 10**6), st.sampled_from(["em", "saem", "ssaem"]), st.integers(1, 4))
def test_outer_iterates_nonnegative(seed, method, s):
    obj, _ = emission_instance(seed % 50, n_side=5, n_angles=3, n_rays=8)
    s = 1 if method == "em" else s
    cfg = SolverConfig(method, s, threshold=-np.inf, max_iters=4, seed=seed, timing=False)
    solver = Solver(obj, cfg)
    x = starting_image(obj.R, obj.b)
    sched, _ = solver.make_schedule(x)
    for k in range(4):
        x = solver.step(x, k, 1.0 if sched is None else sched(k))
        assert np.all(x >= 0)


def test_soft_decrease_property():
    # logged rather than asserted: a stochastic consequence of the theory
    hits = 0
    for seed in range(20):
        obj, _ = emission_instance(seed, n_side=6, n_angles=4, n_rays=9)
        x0 = starting_image(obj.R, obj.b)
        res = run(obj, x0, SolverConfig("saem", 3, threshold=-np.inf, max_iters=30, seed=seed))
        hits += res.records[-1].objective <= obj.kl(x0)
    log.info("SAEM decreased the objective on %d/20 instances", hits)
    if hits < 18:
        warnings.warn(f"soft decrease property held on only {hits}/20 instances")
