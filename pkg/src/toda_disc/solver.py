"""Dirichlet solves on subdiscs and the exhaustion, mollification and
uniqueness drivers built on them.

Newton's method works on the Jacobi-scaled residual ``R_j / |dR_j/du_j|``.
The raw residual carries round-off of order ``eps * 1/(rho_0 dtheta)^2`` on
the innermost ring, which on fine lattices sits above ``1e-10``; the scaled
residual has a floor near machine epsilon and is what ``newton_tol`` bounds.
Both norms are recorded in the report.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import PolarGrid, cached_laplacian, make_grid, sigma_log
from .toda_core import TodaState, jacobian, lambda_vector, reconstruct_h, residual
from .weights import WeightModel, boundary_E, eval_E, mollify

SCHEMES = ("newton", "monotone")


class SolverError(RuntimeError):
    pass


class NonConvergence(SolverError):
    def __init__(self, message, state=None, report=None):
        super().__init__(message)
        self.state = state
        self.report = report


class LinearSolveFailure(SolverError):
    pass


class BracketViolation(SolverError):
    pass


@dataclass
class SolveOptions:
    newton_tol: float = 1e-10
    max_newton: int = 50
    armijo_factor: float = 0.5
    min_step: float = 2.0**-20
    linear_tol: float = 1e-12
    scheme: str = "newton"
    closure: str = "cubic"
    max_monotone: int = 20000

    def __post_init__(self):
        if self.newton_tol <= 0 or self.linear_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_newton < 1 or self.max_monotone < 1:
            raise ValueError("iteration budgets must be >= 1")
        if not 0 < self.armijo_factor < 1 or not 0 < self.min_step <= 1:
            raise ValueError("bad line-search parameters")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    scheme: str
    residual_history: list = field(default_factory=list)
    raw_residual: float = float("nan")
    step_sizes: list = field(default_factory=list)
    bracket_certificate: dict | None = None
    wall_time: float = 0.0
    message: str = ""

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "scheme": self.scheme,
            "residual_history": [float(x) for x in self.residual_history],
            "raw_residual": float(self.raw_residual),
            "step_sizes": [float(x) for x in self.step_sizes],
            "bracket_certificate": self.bracket_certificate,
            "wall_time": self.wall_time,
            "message": self.message,
        }


# -- boundary data and barriers ----------------------------------------------

def lm_value(R: float) -> float:
    """``u`` on the circle of radius R for ``H_j = (1/2) h_X^{-1}``."""
    return -2.0 * math.log1p(-R * R)


def boundary_lm(grid: PolarGrid, r: int = 2) -> np.ndarray:
    return np.full((r - 1, grid.n_theta), lm_value(grid.outer_radius))


def boundary_seed(grid: PolarGrid, r: int, density_factor: float = 1.0) -> np.ndarray:
    """LM data with every volume density multiplied by ``density_factor``."""
    if density_factor <= 0:
        raise ValueError("density factor must be positive")
    return boundary_lm(grid, r) + math.log(density_factor)


def hyperbolic_subsolution(r: int, grid: PolarGrid, boundary: np.ndarray) -> np.ndarray:
    """``log lambda_j - 2 log(1 - rho^2)`` shifted down until it sits below the data.

    A downward shift of the hyperbolic solution stays a subsolution for any
    ``E >= 0``.
    """
    base = -2.0 * np.log1p(-grid.rho2d() ** 2)
    sub = np.log(lambda_vector(r))[:, None, None] + base[None]
    at_ring = np.log(lambda_vector(r)) + lm_value(grid.outer_radius)
    shift = np.maximum(0.0, at_ring - boundary.min(axis=1))
    return sub - shift[:, None, None]


def _splu(A):
    try:
        return spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise LinearSolveFailure(str(exc)) from exc


def harmonic_extension(grid: PolarGrid, boundary: np.ndarray, closure: str = "cubic") -> np.ndarray:
    L, b = cached_laplacian(grid, closure)
    lu = _splu(L)
    out = [lu.solve(-(b * g[None, :]).ravel()).reshape(grid.shape) for g in boundary]
    return np.stack(out)


def initial_guess(r: int, grid: PolarGrid, boundary: np.ndarray, closure: str = "cubic") -> np.ndarray:
    return np.maximum(
        hyperbolic_subsolution(r, grid, boundary), harmonic_extension(grid, boundary, closure)
    )


# -- Newton -------------------------------------------------------------------

def jacobi_scale(state: TodaState, closure: str = "cubic") -> np.ndarray:
    """``|dR_j/du_j|`` at every node."""
    L, _ = cached_laplacian(state.grid, closure)
    d = np.abs(L.diagonal()).reshape(state.grid.shape)
    m = state.r - 1
    touches = np.array([(j == 0) + (j == m - 1) for j in range(m)], dtype=np.float64)
    v0 = state.vol0()
    return d[None] + 8.0 * np.exp(state.u) + 4.0 * touches[:, None, None] * v0[None]


def scaled_residual(state: TodaState, closure: str = "cubic") -> tuple[float, float, np.ndarray]:
    R = residual(state, closure)
    return float(np.max(np.abs(R) / jacobi_scale(state, closure))), float(np.max(np.abs(R))), R


def _node_major(m: int, N: int) -> np.ndarray:
    return (np.arange(N)[:, None] + N * np.arange(m)[None, :]).ravel()


def _newton_step(state: TodaState, R: np.ndarray, opts: SolveOptions) -> np.ndarray:
    m, N = state.r - 1, state.grid.size
    perm = _node_major(m, N)
    J = jacobian(state, opts.closure)[perm][:, perm]
    rhs = -R.ravel()[perm]
    lu = _splu(J)
    x = lu.solve(rhs)
    lin = np.abs(J @ x - rhs).max()
    if lin > opts.linear_tol * max(np.abs(rhs).max(), 1e-300):
        x += lu.solve(rhs - J @ x)
    if not np.all(np.isfinite(x)):
        raise LinearSolveFailure("non-finite Newton step")
    du = np.empty_like(x)
    du[perm] = x
    return du.reshape(state.u.shape)


def _newton(state: TodaState, opts: SolveOptions) -> tuple[TodaState, SolveReport]:
    t0 = time.perf_counter()
    rep = SolveReport(False, 0, "newton")
    s, raw, R = scaled_residual(state, opts.closure)
    rep.residual_history.append(s)
    rep.raw_residual = raw
    it = 0
    while s > opts.newton_tol:
        if it >= opts.max_newton:
            rep.message = f"Newton budget of {opts.max_newton} iterations exhausted"
            break
        du = _newton_step(state, R, opts)
        t = 1.0
        accepted = False
        while t >= opts.min_step:
            trial = state.with_u(state.u + t * du)
            with np.errstate(over="ignore", invalid="ignore"):
                st, rt, Rt = scaled_residual(trial, opts.closure)
            if np.isfinite(st) and st < (1.0 - 1e-4 * t) * s:
                accepted = True
                break
            t *= opts.armijo_factor
        it += 1
        if not accepted:
            rep.message = "line search stalled"
            break
        state, s, raw, R = trial, st, rt, Rt
        rep.residual_history.append(s)
        rep.step_sizes.append(t)
        rep.raw_residual = raw
    rep.iterations = it
    rep.converged = s <= opts.newton_tol
    if rep.converged:
        rep.message = "converged"
    rep.wall_time = time.perf_counter() - t0
    return state, rep


# -- monotone iteration ----------------------------------------------------------

def _supersolution_level(E: np.ndarray, sub: np.ndarray, boundary: np.ndarray) -> float:
    """Constant ``K`` that is a supersolution relative to ``sub`` (see module notes)."""
    level = max(float(boundary.max()), float(sub.max()))
    with np.errstate(divide="ignore"):
        lhs = np.log(E) - sub.sum(axis=0)
    if np.any(E > 0):
        level = max(level, float(lhs[E > 0].max()))
    return level


def _coupled_rhs(x: np.ndarray, y: np.ndarray, E: np.ndarray) -> np.ndarray:
    """``8 e^{x_j} - 4 e^{x_{j+-1}}`` with the degenerate density taken from ``y``."""
    ex = np.exp(x)
    v0 = E * np.exp(-y.sum(axis=0))
    lower = np.concatenate([v0[None], ex[:-1]], axis=0)
    upper = np.concatenate([ex[1:], v0[None]], axis=0)
    return 4.0 * (2.0 * ex - lower - upper)


def _monotone(state: TodaState, opts: SolveOptions) -> tuple[TodaState, SolveReport]:
    """Coupled sub/supersolution iteration.

    The neighbour couplings are cooperative but the degenerate density
    ``E exp(-sum u)`` is competitive, so the super sequence takes it from the
    sub iterate and vice versa.  With ``E = 0`` this is the plain scheme
    ``(Delta - M) u^{k+1} = f(u^k) - M u^k``.
    """
    t0 = time.perf_counter()
    grid, r, E, g = state.grid, state.r, state.E, state.boundary
    L, b = cached_laplacian(grid, opts.closure)
    bterm = np.stack([(b * gj[None, :]) for gj in g])
    lo = hyperbolic_subsolution(r, grid, g)
    hi = np.full_like(lo, _supersolution_level(E, lo, g))
    sub0, sup0 = lo.copy(), hi.copy()
    rep = SolveReport(False, 0, "monotone")
    cert = {"sub_le_super": True, "sub_increasing": True, "super_decreasing": True,
            "within_initial_brackets": True, "max_violation": 0.0}
    M_used, lu = None, None
    I = sp.identity(grid.size, format="csr")
    gap = float(np.max(hi - lo))
    k = 0
    while k < opts.max_monotone:
        M = 8.0 * float(np.exp(hi).max()) + 4.0 * float((E * np.exp(-lo.sum(axis=0))).max())
        if M_used is None or M > M_used or M < 0.5 * M_used:
            M_used = M
            lu = _splu(L - M_used * I)
        new_hi = np.stack([
            lu.solve((_coupled_rhs(hi, lo, E)[j] - M_used * hi[j] - bterm[j]).ravel()).reshape(grid.shape)
            for j in range(r - 1)
        ])
        new_lo = np.stack([
            lu.solve((_coupled_rhs(lo, hi, E)[j] - M_used * lo[j] - bterm[j]).ravel()).reshape(grid.shape)
            for j in range(r - 1)
        ])
        slack = 1e-12 * (1.0 + np.abs(new_hi))
        checks = {
            "sub_le_super": new_lo - new_hi,
            "sub_increasing": lo - new_lo,
            "super_decreasing": new_hi - hi,
            "within_initial_brackets": np.maximum(sub0 - new_lo, new_hi - sup0),
        }
        for key, viol in checks.items():
            worst = float(np.max(viol - slack))
            if worst > 0:
                cert[key] = False
                cert["max_violation"] = max(cert["max_violation"], worst)
        if not all(cert[key] for key in checks):
            rep.bracket_certificate = cert
            raise BracketViolation(f"bracket violated at iteration {k + 1}: {cert}")
        change = max(float(np.max(hi - new_hi)), float(np.max(new_lo - lo)))
        hi, lo = new_hi, new_lo
        gap = float(np.max(hi - lo))
        k += 1
        rep.residual_history.append(change)
        if change <= opts.newton_tol and gap <= max(opts.newton_tol, 1e-8):
            rep.converged = True
            break
    cert["final_gap"] = gap
    rep.bracket_certificate = cert
    rep.iterations = k
    out = state.with_u(0.5 * (hi + lo))
    out.meta["sub"] = lo
    out.meta["super"] = hi
    s, raw, _ = scaled_residual(out, opts.closure)
    rep.raw_residual = raw
    rep.message = "converged" if rep.converged else f"monotone budget of {opts.max_monotone} exhausted"
    rep.wall_time = time.perf_counter() - t0
    return out, rep


# -- public solves ---------------------------------------------------------------

def _as_E(weight, grid: PolarGrid) -> np.ndarray:
    if isinstance(weight, WeightModel):
        return eval_E(weight, grid).values
    E = np.asarray(weight, dtype=np.float64)
    if E.shape != grid.shape:
        raise ValueError("E array does not match the grid")
    return E


def solve_dirichlet(weight, grid: PolarGrid, boundary, opts: SolveOptions | None = None,
                    initial: np.ndarray | None = None, r: int | None = None,
                    raise_on_failure: bool = True) -> tuple[TodaState, SolveReport]:
    """Solve the Toda system on ``grid`` with Dirichlet data at ``|z| = R``.

    ``weight`` is a :class:`WeightModel` or a precomputed E array (then ``r``
    is required).
    """
    opts = opts or SolveOptions()
    if r is None:
        if not isinstance(weight, WeightModel):
            raise ValueError("rank r is required when E is given as an array")
        r = weight.r
    boundary = np.asarray(boundary, dtype=np.float64)
    if boundary.shape != (r - 1, grid.n_theta) or not np.all(np.isfinite(boundary)):
        raise ValueError("boundary must be finite with shape (r-1, n_theta)")
    E = _as_E(weight, grid)
    if initial is None:
        initial = initial_guess(r, grid, boundary, opts.closure)
    state = TodaState(r, grid, initial, E, boundary, {})
    if opts.scheme == "monotone":
        state, rep = _monotone(state, opts)
    else:
        state, rep = _newton(state, opts)
    state.meta.update({"scheme": rep.scheme, "converged": rep.converged})
    if not rep.converged and raise_on_failure:
        raise NonConvergence(rep.message, state, rep)
    return state, rep


def solve_monotone(weight, grid, boundary, opts: SolveOptions | None = None, **kw):
    opts = opts or SolveOptions()
    o = SolveOptions(**{**opts.__dict__, "scheme": "monotone"})
    return solve_dirichlet(weight, grid, boundary, o, **kw)


# -- exhaustion ----------------------------------------------------------------

def stage_radius(i: int) -> float:
    return 1.0 - 1.0 / i


def master_lattice(I: int, n_theta: int = 64, refine: int = 1) -> PolarGrid:
    """Lattice on ``D_{1/I}`` whose faces include every stage radius ``1 - 1/i``."""
    if I < 2:
        raise ValueError("stage count I must be >= 2")
    lcm = math.lcm(*range(2, I + 1))
    base = lcm - lcm // I
    n_r = base * math.ceil(8 / base) * refine
    return make_grid(n_r, n_theta, stage_radius(I))


def stage_grids(master: PolarGrid, I: int) -> list[PolarGrid]:
    return [master.subgrid(master.ring_index(stage_radius(i))) for i in range(2, I + 1)]


def _lowest_w(state: TodaState, n_rings: int | None = None) -> np.ndarray:
    w = reconstruct_h(state)[: max(state.r // 2, 1)]
    return w if n_rings is None else w[:, :n_rings]


@dataclass
class ExhaustionRun:
    r: int
    master: PolarGrid
    radii: list
    states: list
    reports: list
    compact_radius: float
    compact_diffs: list
    monotonicity: dict
    khn: list
    truncated: bool = False
    error: str = ""

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "master": {"n_r": self.master.n_r, "n_theta": self.master.n_theta,
                       "outer_radius": self.master.outer_radius},
            "radii": self.radii,
            "reports": [rp.to_dict() for rp in self.reports],
            "compact_radius": self.compact_radius,
            "compact_diffs": self.compact_diffs,
            "monotonicity": self.monotonicity,
            "khn": self.khn,
            "truncated": self.truncated,
            "error": self.error,
        }


def monotonicity_certificate(states: list, expected: str = "decreasing", slack: float = 1e-9) -> dict:
    """Pointwise ordering of ``w_j`` (``j <= n``) between consecutive stages.

    Stage ``k`` is compared with stage ``k+1`` on the nodes of stage ``k``.
    ``margins[k]`` is the worst signed margin in the expected direction.
    """
    if expected not in ("increasing", "decreasing"):
        raise ValueError("expected must be 'increasing' or 'decreasing'")
    margins, observed = [], []
    for a, b in zip(states[:-1], states[1:]):
        nr = a.grid.n_r
        d = _lowest_w(b, nr) - _lowest_w(a, nr)
        inc, dec = float(d.min()), float(-d.max())
        margins.append(inc if expected == "increasing" else dec)
        observed.append("increasing" if inc >= -slack else "decreasing" if dec >= -slack else "mixed")
    worst = min(margins) if margins else 0.0
    return {
        "expected": expected,
        "slack": slack,
        "margins": margins,
        "observed": observed,
        "worst_margin": worst,
        "passed": worst >= -slack,
    }


def compact_differences(states: list, radius: float = 0.5) -> list:
    """``max |w^{(k+1)} - w^{(k)}|`` over all ``j`` on the rings inside ``radius``."""
    out = []
    for a, b in zip(states[:-1], states[1:]):
        k = a.grid.ring_index(radius)
        out.append(float(np.max(np.abs(reconstruct_h(b)[:, :k] - reconstruct_h(a)[:, :k]))))
    return out


def run_exhaustion(weight: WeightModel, I: int, master: PolarGrid | None = None,
                   opts: SolveOptions | None = None, density_factor: float = 1.0,
                   compact_radius: float = 0.5, expected: str = "decreasing") -> ExhaustionRun:
    """Dirichlet solves on ``D_{1/i}``, ``i = 2..I``, with LM data on each boundary.

    LM data on stage ``i`` lie below the trace of stage ``i+1`` (which is
    ``>= (1/2) omega`` there), so by comparison the stage volumes increase and
    ``w_j`` (``j <= n``) decrease with ``i``; that is the default ``expected``
    direction.
    """
    from .analysis import check_khn

    opts = opts or SolveOptions()
    master = master or master_lattice(I)
    if not np.isclose(master.outer_radius, stage_radius(I)) and master.outer_radius < stage_radius(I):
        raise ValueError("master lattice does not reach the last stage radius")
    grids = stage_grids(master, I)
    master.ring_index(compact_radius)
    states, reports, radii, khn = [], [], [], []
    run = ExhaustionRun(weight.r, master, radii, states, reports, compact_radius, [], {}, khn)
    for i, g in zip(range(2, I + 1), grids):
        bnd = boundary_seed(g, weight.r, density_factor)
        try:
            st, rep = solve_dirichlet(weight, g, bnd, opts)
        except SolverError as exc:
            run.truncated = True
            run.error = f"stage {i}: {exc}"
            break
        st.meta["stage"] = i
        states.append(st)
        reports.append(rep)
        radii.append(g.outer_radius)
        khn.append(check_khn(st).summary())
    usable = [s for s in states if s.grid.outer_radius >= compact_radius - 1e-12]
    run.compact_diffs = compact_differences(usable, compact_radius)
    run.monotonicity = monotonicity_certificate(states, expected)
    return run


def strictly_decreasing(seq) -> bool:
    return all(b < a for a, b in zip(seq[:-1], seq[1:]))


# -- mollification -----------------------------------------------------------------

@dataclass
class MollificationRun:
    deltas: list
    states: list
    reports: list
    monotonicity: dict
    compact_diffs: list
    direct_diff: float | None
    direct_state: TodaState | None = None

    def to_dict(self) -> dict:
        return {
            "deltas": self.deltas,
            "reports": [rp.to_dict() for rp in self.reports],
            "monotonicity": self.monotonicity,
            "compact_diffs": self.compact_diffs,
            "direct_diff": self.direct_diff,
        }


def check_schedule(deltas) -> list:
    deltas = [float(d) for d in deltas]
    if not deltas or any(d <= 0 for d in deltas):
        raise ValueError("mollifier radii must be positive")
    if any(b >= a for a, b in zip(deltas[:-1], deltas[1:])):
        raise ValueError("mollifier radii must be strictly decreasing")
    return deltas


def run_mollification(weight: WeightModel, deltas, grid: PolarGrid,
                      opts: SolveOptions | None = None, compact_radius: float = 0.5,
                      direct: bool = True) -> MollificationRun:
    """Solve with ``phi_delta`` on one fixed subdisc for each radius in ``deltas``.

    Smaller ``delta`` means smaller ``phi_delta`` and so smaller E; the
    solutions then have smaller volumes, i.e. ``w_j`` (``j <= n``) increase as
    ``delta`` decreases.
    """
    opts = opts or SolveOptions()
    deltas = check_schedule(deltas)
    bnd = boundary_lm(grid, weight.r)
    states, reports = [], []
    for d in deltas:
        st, rep = solve_dirichlet(mollify(weight, d, grid), grid, bnd, opts)
        st.meta["delta"] = d
        states.append(st)
        reports.append(rep)
    mono = monotonicity_certificate(states, "increasing")
    diffs = compact_differences(states, compact_radius)
    direct_diff, ref = None, None
    if direct:
        ref, _ = solve_dirichlet(weight, grid, bnd, opts)
        k = grid.ring_index(compact_radius)
        direct_diff = float(np.max(np.abs(reconstruct_h(states[-1])[:, :k] - reconstruct_h(ref)[:, :k])))
    return MollificationRun(deltas, states, reports, mono, diffs, direct_diff, ref)


# -- uniqueness probe -------------------------------------------------------------

@dataclass
class UniquenessProbe:
    factors: tuple
    radii: list
    discrepancies: list
    decreasing: bool
    ratio: float
    passed: bool
    runs: tuple = ()

    def to_dict(self) -> dict:
        return {
            "factors": list(self.factors),
            "radii": self.radii,
            "discrepancies": self.discrepancies,
            "strictly_decreasing": self.decreasing,
            "final_over_initial": self.ratio,
            "passed": self.passed,
        }


def run_uniqueness_probe(weight: WeightModel, I: int, master: PolarGrid | None = None,
                         factors=(1.0, 1.5), opts: SolveOptions | None = None,
                         compact_radius: float = 0.5, target_ratio: float = 1e-2) -> UniquenessProbe:
    """Exhaust from two boundary seeds and track their gap on ``D_{compact_radius}``."""
    if len(factors) != 2:
        raise ValueError("exactly two seeds are required")
    master = master or master_lattice(I)
    runs = tuple(
        run_exhaustion(weight, I, master, opts, density_factor=f, compact_radius=compact_radius)
        for f in factors
    )
    a, b = runs
    if a.truncated or b.truncated:
        raise SolverError(a.error or b.error)
    radii, disc = [], []
    for sa, sb in zip(a.states, b.states):
        if sa.grid.outer_radius < compact_radius - 1e-12:
            continue
        k = sa.grid.ring_index(compact_radius)
        radii.append(sa.grid.outer_radius)
        disc.append(float(np.max(np.abs(reconstruct_h(sa)[:, :k] - reconstruct_h(sb)[:, :k]))))
    dec = strictly_decreasing(disc)
    ratio = disc[-1] / disc[0] if disc and disc[0] > 0 else 0.0
    passed = dec and ratio <= target_ratio if factors[0] != factors[1] else max(disc, default=0.0) <= 1e-8
    return UniquenessProbe(tuple(factors), radii, disc, dec, ratio, passed, runs)
