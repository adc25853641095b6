"""Checks that a solved state obeys the bounds and inequalities attached to
solutions: volume bounds, domination of ``h_1..h_n``, completeness trends,
entropy/free energy, and discrete forms of the distributional inequalities.

Curvature of a metric on ``K^{-1}`` with density ``e^v`` is ``-Delta v / 4``
and ``i d dbar f`` has density ``Delta f / 4``; the inequalities below are
evaluated with these conventions on interior rings (all but the outermost,
whose stencil reaches the Dirichlet data).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .geometry import PolarGrid, apply_laplacian, omega_density, sigma_log
from .toda_core import TodaState, exact_hyperbolic, reconstruct_h

LOG2 = float(np.log(2.0))


# -- constants --------------------------------------------------------------------

def lemma1_constant(r: int) -> float:
    return 1.0 / (r * r * (r - 1))


def bound_constants(r: int, M_phi: float) -> dict:
    """``C_1 = C/2``, ``C_2 = r C`` with ``C = 1/(r^2 (r-1))``, and ``C_{M_phi}``."""
    C = lemma1_constant(r)
    C1 = C / 2.0
    C2 = r * C
    CM = max((C2 * M_phi + 1.0) / C1, (r - 1) / 2.0 + 2.0 ** (r - 1) * M_phi**r)
    return {"C": C, "C1": C1, "C2": C2, "C_M": CM, "M_phi": M_phi}


# -- volume bounds -------------------------------------------------------------------

@dataclass
class BoundsReport:
    passed: bool
    lower_passed: bool
    upper_passed: bool
    ratio_min: list
    ratio_max: list
    lower_violations: list
    upper_violations: list
    constants: dict

    def to_dict(self):
        d = dict(self.__dict__)
        d["lower_violations"] = self.lower_violations[:50]
        d["upper_violations"] = self.upper_violations[:50]
        return d


def check_volume_bounds(state: TodaState, M_phi: float, rel_tol: float = 1e-6) -> BoundsReport:
    """``omega/2 - tol <= e^{u_j} <= C_{M_phi} omega + tol`` with ``tol = rel_tol * omega``."""
    if not np.isfinite(M_phi):
        raise ValueError("M_phi must be finite")
    consts = bound_constants(state.r, M_phi)
    om = omega_density(state.grid.rho2d())
    ratio = np.exp(state.u) / om[None]
    lo = np.argwhere(ratio < 0.5 - rel_tol)
    hi = np.argwhere(ratio > consts["C_M"] + rel_tol)
    lower = [tuple(int(x) for x in v) for v in lo]
    upper = [tuple(int(x) for x in v) for v in hi]
    return BoundsReport(
        not lower and not upper, not lower, not upper,
        [float(x) for x in ratio.reshape(state.r - 1, -1).min(axis=1)],
        [float(x) for x in ratio.reshape(state.r - 1, -1).max(axis=1)],
        lower, upper, consts,
    )


# -- domination of h_1..h_n --------------------------------------------------------------

@dataclass
class KhnReport:
    passed: bool
    chain_margins: dict
    top_margin: float
    tol: float

    def summary(self) -> dict:
        return {"passed": self.passed, "chain_margins": self.chain_margins,
                "top_margin": self.top_margin, "tol": self.tol}


def check_khn(state: TodaState, bg=None, tol: float = 1e-8) -> KhnReport:
    """``h_{n-k} <= 2^k h_X^k h_n`` and ``h_n^{2n+2-r} <= 2 h_X`` in log form.

    Margins are ``min(rhs - lhs)``; a check passes when its margin is ``>= -tol``.
    """
    w = reconstruct_h(state)
    n = state.r // 2
    ls = sigma_log(state.grid.rho2d())
    wn = w[n - 1]
    chain = {}
    for k in range(1, n):
        rhs = wn + k * (LOG2 + ls)
        chain[k] = float(np.min(rhs - w[n - 1 - k]))
    top = float(np.min(LOG2 + ls - (2 * n + 2 - state.r) * wn))
    ok = top >= -tol and all(m >= -tol for m in chain.values())
    return KhnReport(ok, chain, top, tol)


# -- completeness ------------------------------------------------------------------------

def ray_lengths(state: TodaState, rays) -> np.ndarray:
    """``sum_i e^{u_j/2} d rho`` along each ray; shape ``(r-1, len(rays))``."""
    g = state.grid
    k = np.mod(np.rint(np.asarray(rays, dtype=float) / g.dtheta).astype(int), g.n_theta)
    return np.exp(0.5 * state.u[:, :, k]).sum(axis=1) * g.dr


def poincare_partial_length(grid: PolarGrid) -> float:
    """Discrete ``int_0^R d rho / (1 - rho^2)``, the length of ``(1/2) omega``."""
    return float(np.sum(1.0 / (1.0 - grid.rho**2)) * grid.dr)


def completeness_diagnostic(states, rays=(0.0, np.pi / 2, np.pi, 3 * np.pi / 2),
                            bounds: list | None = None) -> dict:
    """Partial ray lengths per stage, their trend, and the lower-bound certificate.

    If ``e^{u_j} >= omega/2`` on a stage then every ray length is at least the
    Poincare partial length ``atanh(R)``-like sum, which diverges as ``R -> 1``.
    """
    states = list(getattr(states, "states", states))
    if len(states) < 2:
        raise ValueError("completeness diagnostic needs at least two stages")
    L = np.stack([ray_lengths(s, rays) for s in states])
    P = np.array([poincare_partial_length(s.grid) for s in states])
    increasing = bool(np.all(np.diff(L, axis=0) > 0))
    if bounds is None:
        bounds = [check_volume_bounds(s, 1.0).lower_passed for s in states]
    dominated = bool(np.all(L >= (P[:, None, None] - 1e-12)))
    return {
        "lengths": L.tolist(),
        "poincare": P.tolist(),
        "increasing": increasing,
        "lower_bound_passed": list(bounds),
        "dominates_poincare": dominated,
        "certified": bool(all(bounds) and dominated and increasing),
    }


# -- entropy / free energy ----------------------------------------------------------------

REFERENCES = ("omega_X", "H_1")


def reference_log_density(state: TodaState, reference) -> tuple[str, np.ndarray]:
    if isinstance(reference, str):
        if reference == "omega_X":
            return reference, np.log(omega_density(state.grid.rho2d()))
        if reference.startswith("H_"):
            j = int(reference[2:])
            if not 1 <= j <= state.r - 1:
                raise ValueError(f"no metric {reference} for r={state.r}")
            return reference, state.u[j - 1]
        raise ValueError(f"unknown reference {reference!r}")
    arr = np.asarray(reference, dtype=np.float64)
    if arr.shape != state.grid.shape or np.any(arr <= 0):
        raise ValueError("custom reference must be a positive density on the grid")
    return "custom", np.log(arr)


@dataclass
class ThermoReport:
    beta: float
    reference: str
    p: np.ndarray
    S: np.ndarray
    F: np.ndarray
    sum_defect: float = 0.0
    extras: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "beta": self.beta,
            "reference": self.reference,
            "sum_defect": self.sum_defect,
            "S_min": float(self.S.min()),
            "S_max": float(self.S.max()),
            "F_min": float(self.F.min()),
            "F_max": float(self.F.max()),
        }


def _log_volumes(state: TodaState) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.concatenate([state.log_h0()[None], state.u], axis=0)


def thermo(state: TodaState, beta: float, reference="omega_X") -> ThermoReport:
    """Gibbs weights of the r volume densities ``H_0..H_{r-1}``.

    Where E vanishes the degenerate volume is dropped (``p_0 = 0``) for
    either sign of ``beta``.
    """
    if beta == 0:
        raise ValueError("beta must be nonzero")
    name, lref = reference_log_density(state, reference)
    lv = _log_volumes(state)
    a = beta * (lv - lref[None])
    a[0] = np.where(np.isfinite(lv[0]), a[0], -np.inf)
    lse = logsumexp(a, axis=0)
    p = np.exp(a - lse[None])
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    S = np.clip(-plogp.sum(axis=0), 0.0, None)
    F = -lse / beta
    defect = float(np.max(np.abs(p.sum(axis=0) - 1.0)))
    return ThermoReport(float(beta), name, p, S, F, defect)


def free_energy_invariance(state_a: TodaState, state_b: TodaState, beta: float,
                           ref1="omega_X", ref2="H_1") -> float:
    """``max |(F_a - F_b)|_{ref1} - (F_a - F_b)|_{ref2}|``.

    A reference must be state-independent for the identity to hold, so named
    state metrics (``H_j``) are taken from ``state_a`` for both states.
    """
    if state_a.grid != state_b.grid:
        raise ValueError("states live on different grids")
    _, l1 = reference_log_density(state_a, ref1)
    _, l2 = reference_log_density(state_a, ref2)
    d1 = thermo(state_a, beta, np.exp(l1)).F - thermo(state_b, beta, np.exp(l1)).F
    d2 = thermo(state_a, beta, np.exp(l2)).F - thermo(state_b, beta, np.exp(l2)).F
    return float(np.max(np.abs(d1 - d2)))


# -- discrete distributional inequalities -------------------------------------------------------

def interior_laplacian(grid: PolarGrid, f: np.ndarray) -> np.ndarray:
    """Five-point Laplacian on rings ``0..n_r-2`` (no Dirichlet data involved)."""
    return apply_laplacian(grid, f, f[-1].copy())[:-1]


def _master_margin(state: TodaState) -> np.ndarray:
    """``Delta/4 log sum_j vol_j - sum_j (vol_{j-1} - vol_j)^2 / sum_j vol_j``.

    Reference-free form of the inequality: the reference curvature, taken
    with the same discrete Laplacian, cancels the reference inside the log.
    """
    v = state.volumes()
    total = v.sum(axis=0)
    diffs = v - np.roll(v, 1, axis=0)
    rhs = (diffs**2).sum(axis=0) / total
    lhs = interior_laplacian(state.grid, np.log(total)) / 4.0
    return lhs - rhs[:-1]


def tol_profile(grid: PolarGrid) -> np.ndarray:
    """Node weights ``(omega / omega(0))^2`` on interior rings.

    Fourth derivatives of the hyperbolic log-density grow like ``omega^2``,
    so this is the natural scale of the truncation error.
    """
    return (omega_density(grid.rho2d())[:-1] / 2.0) ** 2


def calibrate_tol_disc(grid: PolarGrid, safety: float = 10.0) -> float:
    """``c * dr^2``, the tolerance at the centre, read off the exact hyperbolic state.

    For ``r = 2`` the hyperbolic state is an equality case, so its margin is
    pure truncation error.  At other nodes the tolerance is this value times
    :func:`tol_profile`.
    """
    ex = exact_hyperbolic(2, grid)
    return safety * float(np.max(np.abs(_master_margin(ex)) / tol_profile(grid)))


@dataclass
class InequalityReport:
    name: str
    passed: bool
    min_margin: float
    tol_disc: float
    violations: int

    def to_dict(self):
        return dict(self.__dict__)


def _report(name, margin, tol, profile):
    """Margins are reported in units of the local tolerance profile."""
    scaled = margin / profile
    m = float(np.min(scaled))
    return InequalityReport(name, m >= -tol, m, tol, int(np.sum(scaled < -tol)))


def check_master_inequalities(state: TodaState, M_phi: float = 1.0, H_choice=None,
                              tol_disc: float | None = None) -> list:
    """Discrete forms of the three inequalities at interior nodes.

    ``H_choice`` is ``"M_phi"`` (the metric ``M_phi h_X^{-1}``) or ``"H_i"``;
    ``None`` checks all of them.
    """
    grid, r = state.grid, state.r
    if tol_disc is None:
        tol_disc = calibrate_tol_disc(grid)
    prof = tol_profile(grid)
    out = [_report("well-known", _master_margin(state), tol_disc, prof)]
    consts = bound_constants(r, M_phi)
    v = state.volumes()
    total = v.sum(axis=0)
    choices = []
    if H_choice in (None, "M_phi"):
        M = M_phi if M_phi > 0 else 1.0
        choices.append(("C1C2[M_phi]", np.log(M * omega_density(grid.rho2d()))))
    for i in range(1, r):
        if H_choice in (None, "H_i", f"H_{i}"):
            choices.append((f"Hi[{i}]", state.u[i - 1]))
    for name, lH in choices:
        vH = np.exp(lH)
        lhs = interior_laplacian(grid, np.log(total) - lH) / 4.0
        curv = -interior_laplacian(grid, lH) / 4.0
        rhs = consts["C1"] * (total / vH)[:-1] - consts["C2"] + curv / vH[:-1]
        margin = lhs / vH[:-1] - rhs
        out.append(_report(name, margin * vH[:-1], tol_disc, prof))
    return out


def s_subharmonicity_check(state: TodaState, state2: TodaState, tol_disc: float | None = None) -> InequalityReport:
    """``Delta/4 sum s_j >= sum_j s_{j-1}^{-1} (s_{j-1} - s_j)^2 vol(H_{j-1})``.

    ``s_j = h'_j / h_j`` from the determinant-normalised reconstructions.
    """
    if state.grid != state2.grid or state.r != state2.r:
        raise ValueError("states must share grid and rank")
    if not np.array_equal(state.E, state2.E):
        raise ValueError("states must share the weight")
    if tol_disc is None:
        tol_disc = calibrate_tol_disc(state.grid)
    s = np.exp(reconstruct_h(state2) - reconstruct_h(state))
    vol = state.volumes()
    prev = np.roll(s, 1, axis=0)
    rhs = ((prev - s) ** 2 / prev * vol).sum(axis=0)
    lhs = interior_laplacian(state.grid, s.sum(axis=0)) / 4.0
    return _report("s", lhs - rhs[:-1], tol_disc, tol_profile(state.grid))
