import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toda_disc.geometry import make_grid
from toda_disc.toda_core import (
    TodaState,
    cartan_matrix,
    exact_flat,
    exact_hyperbolic,
    jacobian,
    lambda_from_cartan,
    lambda_vector,
    reality_defect,
    reconstruct_h,
    residual,
    u_from_h,
)


def test_lambda_small_ranks():
    # closed form: lambda_j = j (r - j)
    assert lambda_vector(2).tolist() == [1.0]
    assert lambda_vector(3).tolist() == [2.0, 2.0]
    assert lambda_vector(4).tolist() == [3.0, 4.0, 3.0]


@pytest.mark.parametrize("r", range(2, 13))
def test_lambda_matches_cartan_inverse(r):
    assert np.allclose(lambda_vector(r), lambda_from_cartan(r), rtol=0, atol=1e-10)
    assert cartan_matrix(r).shape == (r - 1, r - 1)


def test_rank_one_rejected():
    with pytest.raises(ValueError):
        lambda_vector(1)


@pytest.mark.parametrize("r", [2, 3, 4])
def test_hyperbolic_state_formula(r):
    g = make_grid(8, 16, 0.6)
    st_ = exact_hyperbolic(r, g)
    rho = g.rho[3]
    j = np.arange(1, r)
    assert np.allclose(st_.u[:, 3, 5], np.log(j * (r - j)) - 2 * np.log(1 - rho**2))
    assert reality_defect(st_) == 0.0


@pytest.mark.parametrize("r", [2, 3, 5])
def test_hyperbolic_residual_is_truncation_only(r):
    res = []
    for n in (16, 32):
        st_ = exact_hyperbolic(r, make_grid(n, 2 * n, 0.6))
        res.append(np.max(np.abs(residual(st_)) / np.exp(st_.u)))
    assert res[1] < res[0] / 3.5


@pytest.mark.parametrize("r", [2, 3, 4])
def test_flat_state_is_exact(r):
    g = make_grid(8, 16, 0.5)
    st_ = exact_flat(np.full(g.shape, 2.5), r, g, np.full(16, 2.5))
    assert np.max(np.abs(residual(st_))) < 1e-12


def test_flat_needs_positive_density():
    g = make_grid(4, 8, 0.5)
    with pytest.raises(ValueError):
        exact_flat(np.zeros(g.shape), 2, g)


@pytest.mark.parametrize("r", [2, 3, 4])
def test_jacobian_matches_finite_differences(r, rng):
    g = make_grid(7, 12, 0.7)
    base = exact_hyperbolic(r, g)
    st_ = base.with_u(base.u + 0.2 * rng.standard_normal(base.u.shape))
    st_.E[:] = rng.uniform(0.1, 2.0, g.shape)
    J = jacobian(st_)
    for _ in range(3):
        v = rng.standard_normal(st_.u.shape)
        h = 1e-6
        fd = (residual(st_.with_u(st_.u + h * v)) - residual(st_.with_u(st_.u - h * v))) / (2 * h)
        Jv = (J @ v.ravel()).reshape(v.shape)
        assert np.max(np.abs(Jv - fd)) / np.max(np.abs(Jv)) < 1e-6


def test_state_validation():
    g = make_grid(4, 8, 0.5)
    with pytest.raises(ValueError):
        TodaState(2, g, np.zeros((1, 4, 8)), -np.ones(g.shape))
    with pytest.raises(Exception):
        TodaState(3, g, np.zeros((1, 4, 8)), np.ones(g.shape))
    st_ = TodaState(2, g, np.zeros((1, 4, 8)), np.ones(g.shape))
    with pytest.raises(ValueError):
        residual(st_)


def test_degenerate_volume_vanishes_with_E():
    g = make_grid(4, 8, 0.5)
    st_ = TodaState(3, g, np.zeros((2, 4, 8)), np.zeros(g.shape))
    assert np.all(st_.vol0() == 0.0)
    assert np.all(np.isneginf(st_.log_h0()))
    assert st_.volumes().shape == (3, 4, 8)


def test_restrict_is_prefix():
    g = make_grid(10, 8, 0.5)
    st_ = exact_hyperbolic(3, g)
    sub = st_.restrict(g.subgrid(4))
    assert np.array_equal(sub.u, st_.u[:, :4])
    assert sub.boundary is None


@settings(max_examples=50, deadline=None)
@given(r=st.integers(2, 8), seed=st.integers(0, 2**31))
def test_reconstruction_roundtrip(r, seed):
    u = np.random.default_rng(seed).normal(scale=3, size=(r - 1, 3, 4))
    w = reconstruct_h(u)
    assert w.shape == (r, 3, 4)
    assert np.allclose(w.sum(axis=0), 0.0, atol=1e-12)
    assert np.allclose(u_from_h(w), u, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(r=st.integers(2, 7), seed=st.integers(0, 2**31))
def test_real_input_gives_real_reconstruction(r, seed):
    u = np.random.default_rng(seed).normal(size=(r - 1, 2, 8))
    u = 0.5 * (u + u[::-1])
    w = reconstruct_h(u)
    # H_j = H_{r-j} means h_j h_{r+1-j} = 1, i.e. w_j + w_{r+1-j} = 0
    assert np.allclose(w + w[::-1], 0.0, atol=1e-12)
