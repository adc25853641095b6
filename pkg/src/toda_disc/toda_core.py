"""The diagonal Toda form of the Hitchin equation on a polar lattice.

Unknowns are ``u_j = log`` (density of ``H_j`` on ``d/dz``) for ``j = 1..r-1``.
The weight enters only through ``E = e^{r phi} sigma_X^{-r} >= 0`` via the
degenerate density ``e^{u_0} = e^{u_r} = E exp(-sum_k u_k)``.  The discrete
system is

    R_j = Delta u_j - 4 (2 e^{u_j} - e^{u_{j-1}} - e^{u_{j+1}}) = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .geometry import (
    BackgroundGeometry,
    GridError,
    PolarGrid,
    apply_laplacian,
    cached_laplacian,
)


def lambda_vector(r: int) -> np.ndarray:
    """Cartan constants ``j (r - j)`` scaling the hyperbolic solution."""
    if r < 2:
        raise ValueError(f"rank must be >= 2, got {r}")
    j = np.arange(1, r)
    return (j * (r - j)).astype(np.float64)


def cartan_matrix(r: int) -> np.ndarray:
    """Cartan matrix of type A_{r-1}."""
    m = r - 1
    return 2.0 * np.eye(m) - np.eye(m, k=1) - np.eye(m, k=-1)


def lambda_from_cartan(r: int) -> np.ndarray:
    return 2.0 * np.linalg.inv(cartan_matrix(r)).sum(axis=1)


@dataclass
class TodaState:
    r: int
    grid: PolarGrid
    u: np.ndarray
    E: np.ndarray
    boundary: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.r < 2:
            raise ValueError("rank must be >= 2")
        self.u = np.asarray(self.u, dtype=np.float64)
        self.E = np.asarray(self.E, dtype=np.float64)
        shape = (self.r - 1,) + self.grid.shape
        if self.u.shape != shape:
            raise GridError(f"u has shape {self.u.shape}, expected {shape}")
        if self.E.shape != self.grid.shape:
            raise GridError("E does not match the grid")
        if np.any(self.E < 0):
            raise ValueError("E must be nonnegative")
        if self.boundary is not None:
            self.boundary = np.asarray(self.boundary, dtype=np.float64)
            if self.boundary.shape != (self.r - 1, self.grid.n_theta):
                raise GridError("boundary must have shape (r-1, n_theta)")

    @property
    def n(self) -> int:
        return self.r // 2

    def log_h0(self) -> np.ndarray:
        """``log`` of the degenerate density; ``-inf`` where E vanishes."""
        with np.errstate(divide="ignore"):
            return np.log(self.E) - self.u.sum(axis=0)

    def vol0(self) -> np.ndarray:
        return self.E * np.exp(-self.u.sum(axis=0))

    def volumes(self) -> np.ndarray:
        """Densities of ``H_0, H_1, ..., H_{r-1}`` stacked on axis 0."""
        return np.concatenate([self.vol0()[None], np.exp(self.u)], axis=0)

    def with_u(self, u) -> "TodaState":
        return replace(self, u=np.array(u, dtype=np.float64), meta=dict(self.meta))

    def restrict(self, grid: PolarGrid) -> "TodaState":
        """Prefix extraction onto a nested subgrid; boundary data are dropped."""
        if not grid.nests_in(self.grid):
            raise GridError("target grid is not nested in the state's grid")
        k = grid.n_r
        return TodaState(self.r, grid, self.u[:, :k].copy(), self.E[:k].copy(), None, dict(self.meta))


def _neighbour_volumes(u: np.ndarray, E: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    eu = np.exp(u)
    v0 = E * np.exp(-u.sum(axis=0))
    lower = np.concatenate([v0[None], eu[:-1]], axis=0)
    upper = np.concatenate([eu[1:], v0[None]], axis=0)
    return eu, lower, upper


def reaction(u: np.ndarray, E: np.ndarray) -> np.ndarray:
    eu, lower, upper = _neighbour_volumes(u, E)
    return 4.0 * (2.0 * eu - lower - upper)


def residual(state: TodaState, closure: str = "cubic") -> np.ndarray:
    if state.boundary is None:
        raise ValueError("residual needs boundary data")
    lap = np.stack(
        [
            apply_laplacian(state.grid, state.u[j], state.boundary[j], closure)
            for j in range(state.r - 1)
        ]
    )
    return lap - reaction(state.u, state.E)


def jacobian(state: TodaState, closure: str = "cubic") -> sp.csr_matrix:
    """Exact derivative of the flattened residual (component-major ordering)."""
    r, grid = state.r, state.grid
    m, N = r - 1, grid.size
    L, _ = cached_laplacian(grid, closure)
    eu, _, _ = _neighbour_volumes(state.u, state.E)
    eu = eu.reshape(m, N)
    v0 = (state.E * np.exp(-state.u.sum(axis=0))).ravel()

    blocks = [[None] * m for _ in range(m)]
    # number of neighbours of j that are the degenerate index 0 == r
    touches = np.array([(j == 0) + (j == m - 1) for j in range(m)], dtype=np.float64)
    for j in range(m):
        for k in range(m):
            d = -4.0 * touches[j] * v0
            if k == j:
                d = d - 8.0 * eu[j]
            elif abs(k - j) == 1:
                d = d + 4.0 * eu[k]
            diag = sp.diags(d, format="csr")
            blocks[j][k] = (L + diag) if k == j else diag
    return sp.bmat(blocks, format="csr")


def exact_hyperbolic(r: int, grid: PolarGrid, bg: BackgroundGeometry | None = None) -> TodaState:
    lam = lambda_vector(r)
    rho = grid.rho2d()
    base = -2.0 * np.log1p(-rho**2)
    u = np.log(lam)[:, None, None] + base[None]
    R = grid.outer_radius
    bnd = np.log(lam)[:, None] - 2.0 * np.log1p(-R * R) + np.zeros((1, grid.n_theta))
    return TodaState(r, grid, u, np.zeros(grid.shape), bnd, {"kind": "exact_hyperbolic"})


def exact_flat(E: np.ndarray, r: int, grid: PolarGrid, boundary_E: np.ndarray | None = None) -> TodaState:
    """``u_j = log(E)/r``; ``boundary_E`` gives E on the Dirichlet ring."""
    E = np.asarray(E, dtype=np.float64)
    if np.any(E <= 0):
        raise ValueError("exact_flat needs E > 0 at every node (q must not vanish)")
    u = np.repeat((np.log(E) / r)[None], r - 1, axis=0)
    bnd = None
    if boundary_E is not None:
        bE = np.asarray(boundary_E, dtype=np.float64)
        if np.any(bE <= 0):
            raise ValueError("exact_flat needs E > 0 on the boundary ring")
        bnd = np.repeat((np.log(bE) / r)[None], r - 1, axis=0)
    return TodaState(r, grid, u, E, bnd, {"kind": "exact_flat"})


def reconstruct_h(state_or_u) -> np.ndarray:
    """Log-weights ``w_1..w_r`` with ``w_{j+1} - w_j = u_j`` and ``sum_j w_j = 0``."""
    u = state_or_u.u if isinstance(state_or_u, TodaState) else np.asarray(state_or_u)
    m = u.shape[0]
    r = m + 1
    partial = np.concatenate([np.zeros((1,) + u.shape[1:]), np.cumsum(u, axis=0)], axis=0)
    w1 = -partial.sum(axis=0) / r
    return w1[None] + partial


def u_from_h(w: np.ndarray) -> np.ndarray:
    return np.diff(w, axis=0)


def reality_defect(state: TodaState) -> float:
    u = state.u
    return float(np.max(np.abs(u - u[::-1]))) if u.size else 0.0
