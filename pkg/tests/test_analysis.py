import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toda_disc import analysis, solver, weights
from toda_disc.geometry import make_grid
from toda_disc.toda_core import TodaState, exact_flat, exact_hyperbolic


def test_lemma1_constant():
    # closed form: C = 1 / (r^2 (r - 1))
    assert analysis.lemma1_constant(2) == 0.25
    assert analysis.lemma1_constant(3) == pytest.approx(1 / 18)


def test_bound_constant_r2_M1():
    # [DERIVED] C = 1/4, C1 = C/2 = 1/8, C2 = rC = 1/2:
    # C_M = max((C2 M + 1) / C1, (r - 1)/2 + 2^{r-1} M^r) = max(12, 2.5) = 12
    c = analysis.bound_constants(2, 1.0)
    assert (c["C"], c["C1"], c["C2"]) == (0.25, 0.125, 0.5)
    assert c["C_M"] == 12.0


def test_bound_constant_second_branch():
    # large M_phi: 2^{r-1} M^r dominates once M is big enough
    c = analysis.bound_constants(2, 100.0)
    assert c["C_M"] == pytest.approx(0.5 + 2 * 100.0**2)


@pytest.fixture(scope="module")
def solved():
    g = make_grid(24, 48, 0.8)
    out = {}
    for r in (2, 3):
        for name, coeffs in (("0", [0]), ("1", [1]), ("z", [0, 1])):
            w = weights.differential(coeffs, r)
            st_, _ = solver.solve_dirichlet(w, g, solver.boundary_lm(g, r))
            out[(r, name)] = (st_, w)
    return out


def test_volume_bounds_hold(solved):
    for (r, name), (st_, w) in solved.items():
        M, flag = weights.sup_exp_phi(w, st_.grid)
        rep = analysis.check_volume_bounds(st_, M)
        assert rep.passed, (r, name, rep.ratio_min, rep.ratio_max)
        assert min(rep.ratio_min) >= 0.5 - 1e-6


def test_volume_bounds_negative_control(solved):
    st_, w = solved[(2, "1")]
    shrunk = st_.with_u(st_.u - 1.0)
    rep = analysis.check_volume_bounds(shrunk, 1.0)
    assert not rep.lower_passed and rep.lower_violations
    with pytest.raises(ValueError):
        analysis.check_volume_bounds(st_, np.inf)


def test_khn_on_solutions(solved):
    for st_, _ in solved.values():
        assert analysis.check_khn(st_).passed


def test_master_inequalities_on_solutions(solved):
    for (r, name), (st_, w) in solved.items():
        M, _ = weights.sup_exp_phi(w, st_.grid)
        reps = analysis.check_master_inequalities(st_, M)
        names = [x.name for x in reps]
        assert names[0] == "well-known" and "C1C2[M_phi]" in names
        assert sum(n.startswith("Hi[") for n in names) == r - 1
        assert all(x.passed for x in reps), [(x.name, x.min_margin) for x in reps]


def test_well_known_negative_control():
    # a sharp bump in u breaks the log-subharmonicity inequality
    g = make_grid(24, 48, 0.8)
    ex = exact_hyperbolic(2, g)
    bump = -3.0 * np.exp(-((g.rho2d() - 0.3) / 0.05) ** 2)
    rep = analysis.check_master_inequalities(ex.with_u(ex.u + bump[None]), H_choice="H_i")[0]
    assert not rep.passed and rep.violations > 0


def test_tol_disc_second_order():
    tols = [analysis.calibrate_tol_disc(make_grid(n, 2 * n, 0.8)) for n in (16, 32, 64)]
    orders = np.log2(np.array(tols[:-1]) / np.array(tols[1:]))
    assert np.all(orders >= 1.9)


def test_s_check_between_two_solutions():
    g = make_grid(24, 48, 0.8)
    w = weights.differential([0, 1], 2)
    a, _ = solver.solve_dirichlet(w, g, solver.boundary_lm(g, 2))
    b, _ = solver.solve_dirichlet(w, g, solver.boundary_seed(g, 2, 1.5))
    assert analysis.s_subharmonicity_check(a, b).passed
    c, _ = solver.solve_dirichlet(weights.zero(2), g, solver.boundary_lm(g, 2))
    with pytest.raises(ValueError):
        analysis.s_subharmonicity_check(a, c)


def test_completeness_diagnostic_on_exhaustion():
    run = solver.run_exhaustion(weights.zero(2), 4, solver.master_lattice(4, 16))
    diag = analysis.completeness_diagnostic(run)
    assert diag["increasing"] and diag["dominates_poincare"] and diag["certified"]
    with pytest.raises(ValueError):
        analysis.completeness_diagnostic(run.states[:1])


def test_uniform_state_has_maximal_entropy():
    g = make_grid(6, 8, 0.5)
    for r in (2, 3, 5):
        st_ = exact_flat(np.ones(g.shape), r, g)
        for beta in (1.0, -2.0, 0.5):
            th = analysis.thermo(st_, beta)
            assert np.max(np.abs(th.S - np.log(r))) <= 1e-12
            assert np.allclose(th.p, 1.0 / r, atol=1e-15)


def test_zero_density_drops_degenerate_volume():
    g = make_grid(6, 8, 0.5)
    st_ = exact_hyperbolic(3, g)
    for beta in (1.0, -1.0):
        th = analysis.thermo(st_, beta)
        assert np.all(th.p[0] == 0.0)
        assert th.sum_defect <= 1e-12
        assert np.all(th.S <= np.log(2) + 1e-12)


def test_thermo_input_validation():
    g = make_grid(6, 8, 0.5)
    st_ = exact_hyperbolic(3, g)
    with pytest.raises(ValueError):
        analysis.thermo(st_, 0.0)
    with pytest.raises(ValueError):
        analysis.thermo(st_, 1.0, "H_5")
    with pytest.raises(ValueError):
        analysis.thermo(st_, 1.0, -np.ones(g.shape))


@settings(max_examples=40, deadline=None)
@given(r=st.integers(2, 6), beta=st.floats(-5, 5).filter(lambda b: abs(b) > 1e-3),
       seed=st.integers(0, 2**31), zero_E=st.booleans())
def test_thermo_invariants(r, beta, seed, zero_E):
    rng = np.random.default_rng(seed)
    g = make_grid(4, 8, 0.5)
    E = np.zeros(g.shape) if zero_E else rng.uniform(0.01, 5, g.shape)
    st_ = TodaState(r, g, rng.normal(scale=2, size=(r - 1, 4, 8)), E)
    th = analysis.thermo(st_, beta)
    assert th.sum_defect <= 1e-12
    assert np.all(th.S >= 0) and np.all(th.S <= np.log(r) + 1e-12)
    assert np.all(np.isfinite(th.F))


@settings(max_examples=30, deadline=None)
@given(r=st.integers(2, 5), beta=st.floats(-3, 3).filter(lambda b: abs(b) > 1e-2), seed=st.integers(0, 2**31))
def test_free_energy_difference_is_reference_free(r, beta, seed):
    rng = np.random.default_rng(seed)
    g = make_grid(4, 8, 0.5)
    E = rng.uniform(0.1, 2, g.shape)
    a = TodaState(r, g, rng.normal(size=(r - 1, 4, 8)), E)
    b = TodaState(r, g, rng.normal(size=(r - 1, 4, 8)), E)
    assert analysis.free_energy_invariance(a, b, beta) <= 1e-12
