"""Acceptance criteria 1-11 at their stated tolerances.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary.  Criteria that the method cannot meet are left failing.
"""
import json
import time

import numpy as np
import pytest

from toda_disc import analysis, cli, lemma_lab, solver, weights
from toda_disc.geometry import make_grid
from toda_disc.solver import SolveOptions, boundary_lm, solve_dirichlet
from toda_disc.toda_core import exact_flat, exact_hyperbolic, jacobian, reality_defect, residual

OPTS = SolveOptions()
LATTICE = (64, 128, 0.8)
QS = {"0": [0], "1": [1], "z": [0, 1], "z^2": [0, 0, 1]}


def rel_err(state, exact, rings=None):
    d = np.abs(np.exp(state.u - exact.u) - 1.0)
    return float(np.max(d if rings is None else d[:, :rings]))


# -- shared solves ------------------------------------------------------------

@pytest.fixture(scope="module")
def hyperbolic_runs():
    out = {}
    for r in (2, 3, 4):
        res = {}
        for n in (64, 128):
            g = make_grid(n, 2 * n, 0.8)
            ex = exact_hyperbolic(r, g)
            t0 = time.perf_counter()
            st, rep = solve_dirichlet(weights.zero(r), g, ex.boundary, OPTS)
            res[n] = (st, ex, time.perf_counter() - t0)
        out[r] = res
    return out


@pytest.fixture(scope="module")
def flat_runs():
    out = {}
    g = make_grid(*LATTICE)
    for r in (2, 3):
        w = weights.differential([1], r)
        ex = exact_flat(np.ones(g.shape), r, g, weights.boundary_E(w, g))
        out[r] = solve_dirichlet(w, g, ex.boundary, OPTS)
    return out


@pytest.fixture(scope="module")
def bounds_runs():
    g = make_grid(*LATTICE)
    out = {}
    for r in (2, 3):
        for q in ("0", "1", "z"):
            w = weights.differential(QS[q], r)
            st, _ = solve_dirichlet(w, g, boundary_lm(g, r), OPTS)
            out[(r, q)] = (st, w)
    return out


@pytest.fixture(scope="module")
def exhaustion_runs():
    master = solver.master_lattice(6, n_theta=128, refine=2)
    return {(r, q): solver.run_exhaustion(weights.differential(QS[q], r), 6, master, OPTS)
            for r in (2, 3) for q in ("0", "z")}


@pytest.fixture(scope="module")
def mollification_run():
    g = make_grid(80, 128, 0.8)
    return solver.run_mollification(weights.differential([0, 1], 2), [0.16, 0.08, 0.04, 0.02], g, OPTS)


# -- criteria -----------------------------------------------------------------

@pytest.mark.parametrize("r", [2, 3, 4])
def test_criterion_01_hyperbolic(hyperbolic_runs, record, r):
    res = hyperbolic_runs[r]
    e64, e128 = rel_err(*res[64][:2]), rel_err(*res[128][:2])
    order = float(np.log2(e64 / e128))
    secs = res[128][2]
    ok = e128 <= 5e-3 and order >= 1.9 and secs <= 60
    record(1, ok, f"r={r} rel_err={e128:.2e} order={order:.2f} time={secs:.1f}s")
    assert e128 <= 5e-3
    assert order >= 1.9
    assert secs <= 60


@pytest.mark.parametrize("r", [2, 3])
def test_criterion_02_flat(flat_runs, record, r):
    st, rep = flat_runs[r]
    res = float(np.max(np.abs(residual(st))))
    ok = res <= 1e-10 and rep.iterations <= 3
    record(2, ok, f"r={r} residual={res:.1e} iterations={rep.iterations}")
    assert res <= 1e-10 and rep.iterations <= 3


def test_criterion_03_volume_bounds(bounds_runs, record):
    # C_1 = C/2 and C_2 = rC from the pointwise constant chain give C_M = 12 for r = 2, M = 1
    consts = analysis.bound_constants(2, 1.0)
    lines, ok = [], consts["C_M"] == 12.0
    tight_ok = True
    for (r, q), (st, w) in bounds_runs.items():
        M, unbounded = weights.sup_exp_phi(w, st.grid)
        assert not unbounded
        rep = analysis.check_volume_bounds(st, M, rel_tol=1e-6)
        ok &= rep.passed
        tight_ok &= max(rep.ratio_max) <= 6.0
        lines.append(f"r={r},q={q}:[{min(rep.ratio_min):.3f},{max(rep.ratio_max):.2f}]<=C_M={rep.constants['C_M']:.3g}")
    record(3, ok, " ".join(lines) + f" (also below 6: {tight_ok})")
    assert ok


@pytest.mark.parametrize("r,q", [(2, "0"), (2, "z"), (3, "0"), (3, "z")])
def test_criterion_04_exhaustion(exhaustion_runs, record, r, q):
    run = exhaustion_runs[(r, q)]
    assert not run.truncated and len(run.states) == 5
    mono = run.monotonicity
    dec = solver.strictly_decreasing(run.compact_diffs)
    ok = mono["passed"] and dec
    detail = f"r={r} q={q} worst_margin={mono['worst_margin']:.1e} diffs={[f'{d:.1e}' for d in run.compact_diffs]}"
    limit_err = None
    if q == "0":
        last = run.states[-1]
        k = last.grid.ring_index(0.5)
        limit_err = rel_err(last, exact_hyperbolic(r, last.grid), k)
        ok &= limit_err <= 5e-3
        detail += f" limit_err={limit_err:.2e}"
    record(4, ok, detail)
    assert mono["passed"]
    assert dec
    if limit_err is not None:
        assert limit_err <= 5e-3


def test_criterion_05_mollification(mollification_run, record):
    run = mollification_run
    ok = run.monotonicity["passed"] and run.direct_diff <= 5e-3
    record(5, ok, f"worst_margin={run.monotonicity['worst_margin']:.1e} direct_diff={run.direct_diff:.1e}")
    assert run.monotonicity["passed"]
    assert run.direct_diff <= 5e-3


@pytest.mark.parametrize("r,q", [(2, "0"), (2, "z^2"), (3, "0"), (3, "z^2")])
def test_criterion_06_uniqueness(record, r, q):
    master = solver.master_lattice(6, n_theta=64)
    probe = solver.run_uniqueness_probe(weights.differential(QS[q], r), 6, master, (1.0, 1.5), OPTS)
    record(6, probe.passed, f"r={r} q={q} decreasing={probe.decreasing} final/initial={probe.ratio:.2e}")
    assert probe.decreasing
    assert probe.ratio <= 1e-2


def test_criterion_07_lemma_suite(record):
    t0 = time.perf_counter()
    summ = lemma_lab.run_suite(100_000, seed=7)
    secs = time.perf_counter() - t0
    ok = lemma_lab.suite_passed(summ) and secs <= 120
    worst = min(min(v["lemma1_min_margin_finite"], v["lemma1_min_margin_neg_inf"]) for v in summ["ranks"].values())
    d2 = summ["ranks"]["2"]["lemma3_delta_hat"]
    record(7, ok, f"min_margin={worst:.2e} delta_hat(r=2)={d2} time={secs:.1f}s")
    assert lemma_lab.suite_passed(summ)
    assert secs <= 120


def _all_states(hyperbolic_runs, flat_runs, bounds_runs, exhaustion_runs, mollification_run):
    out = []
    for r, res in hyperbolic_runs.items():
        out += [(f"hyp r={r} n={n}", res[n][0], weights.zero(r)) for n in res]
    out += [(f"flat r={r}", st, weights.differential([1], r)) for r, (st, _) in flat_runs.items()]
    out += [(f"lm r={r} q={q}", st, w) for (r, q), (st, w) in bounds_runs.items()]
    for (r, q), run in exhaustion_runs.items():
        w = weights.differential(QS[q], r)
        out += [(f"stage{st.meta['stage']} r={r} q={q}", st, w) for st in run.states]
    base = weights.differential([0, 1], 2)
    out += [(f"moll d={st.meta['delta']}", st, weights.mollify(base, st.meta["delta"])) for st in mollification_run.states]
    return out


def test_criterion_08_inequalities(hyperbolic_runs, flat_runs, bounds_runs, exhaustion_runs, mollification_run, record):
    tols = [analysis.calibrate_tol_disc(make_grid(n, 2 * n, 0.8)) for n in (32, 64, 128)]
    orders = np.log2(np.array(tols[:-1]) / np.array(tols[1:]))
    failures = []
    states = _all_states(hyperbolic_runs, flat_runs, bounds_runs, exhaustion_runs, mollification_run)
    for name, st, w in states:
        M, _ = weights.sup_exp_phi(w, st.grid)
        for rep in analysis.check_master_inequalities(st, M):
            if not rep.passed:
                failures.append(f"{name}:{rep.name}")
    # (s) between the two seeds on a common lattice
    g = make_grid(*LATTICE)
    for r in (2, 3):
        w = weights.differential([0, 1], r)
        a, _ = solve_dirichlet(w, g, boundary_lm(g, r), OPTS)
        b, _ = solve_dirichlet(w, g, solver.boundary_seed(g, r, 1.5), OPTS)
        if not analysis.s_subharmonicity_check(a, b).passed:
            failures.append(f"s r={r}")
    ok = not failures and np.all(orders >= 1.9)
    record(8, ok, f"{len(states)} states, violations={failures[:5]} tol_disc orders={np.round(orders, 2).tolist()}")
    assert not failures
    assert np.all(orders >= 1.9)


def test_criterion_09_thermo(bounds_runs, flat_runs, record):
    worst_sum, S_ok = 0.0, True
    for (r, q), (st, _) in bounds_runs.items():
        for beta in (1.0, -1.0, 0.5, 3.0):
            th = analysis.thermo(st, beta)
            worst_sum = max(worst_sum, th.sum_defect)
            S_ok &= bool(np.all(th.S >= 0) and np.all(th.S <= np.log(r) + 1e-12))
    uni = max(float(np.max(np.abs(analysis.thermo(st, 1.0).S - np.log(r)))) for r, (st, _) in flat_runs.items())
    g = make_grid(*LATTICE)
    w = weights.differential([0, 1], 3)
    a = bounds_runs[(3, "z")][0]
    b, _ = solve_dirichlet(w, g, solver.boundary_seed(g, 3, 1.5), OPTS)
    inv = max(analysis.free_energy_invariance(a, b, beta, "omega_X", ref)
              for beta in (1.0, -2.0) for ref in ("H_1", "H_2"))
    ok = worst_sum <= 1e-12 and S_ok and uni <= 1e-12 and inv <= 1e-12
    record(9, ok, f"sum_defect={worst_sum:.1e} S_in_range={S_ok} uniform_err={uni:.1e} invariance={inv:.1e}")
    assert worst_sum <= 1e-12 and S_ok
    assert uni <= 1e-12
    assert inv <= 1e-12


def test_criterion_10_reality(hyperbolic_runs, flat_runs, bounds_runs, exhaustion_runs, mollification_run, record):
    states = _all_states(hyperbolic_runs, flat_runs, bounds_runs, exhaustion_runs, mollification_run)
    worst = max(reality_defect(st) for _, st, _ in states)
    ok = worst <= 10 * OPTS.newton_tol
    record(10, ok, f"{len(states)} solves, max reality_defect={worst:.1e}")
    assert ok


def test_criterion_11_hygiene(bounds_runs, record, tmp_path):
    rng = np.random.default_rng(11)
    worst = 0.0
    for key in ((2, "z"), (3, "z"), (3, "1")):
        st = bounds_runs[key][0]
        J = jacobian(st)
        for _ in range(3):
            v = rng.standard_normal(st.u.shape)
            h = 1e-6
            fd = (residual(st.with_u(st.u + h * v)) - residual(st.with_u(st.u - h * v))) / (2 * h)
            Jv = (J @ v.ravel()).reshape(v.shape)
            worst = max(worst, float(np.max(np.abs(Jv - fd)) / np.max(np.abs(Jv))))
    g = make_grid(32, 64, 0.8)
    w = weights.differential([0, 1], 3)
    a, _ = solve_dirichlet(w, g, boundary_lm(g, 3), OPTS)
    b, _ = solve_dirichlet(w, g, boundary_lm(g, 3), OPTS)
    same = np.array_equal(a.u, b.u)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"r": 3, "weight": {"kind": "differential", "coeffs": [0, 1]},
                               "lattice": {"n_r": 24, "n_theta": 32, "outer_radius": 0.8},
                               "output": str(tmp_path / "run")}))
    blobs = []
    for _ in range(2):
        assert cli.main(["solve", "--config", str(cfg), "--heatmaps"]) == 0
        blobs.append({p.name: p.read_bytes() for p in sorted((tmp_path / "run").rglob("*")) if p.is_file()})
    same_cli = blobs[0] == blobs[1]
    ok = worst <= 1e-5 and same and same_cli
    record(11, ok, f"jacobian_fd_rel={worst:.1e} rerun_identical={same} cli_identical={same_cli}")
    assert worst <= 1e-5
    assert same and same_cli
