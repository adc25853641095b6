"""Offset polar lattices on subdiscs of the unit disc and the Poincare background.

Conventions used throughout the package: a Hermitian metric on a line bundle is
stored as the log of its weight on the natural frame (``dz`` for K, ``d/dz`` for
T).  With ``Delta = 4 d^2/dz dzbar`` the curvature density of a metric with
log-weight ``w`` on T is ``-Delta w / 4``.  The Poincare data are

    sigma_X = (1 - |z|^2)^2 / 2        weight of h_X on dz
    omega   = 2 (1 - |z|^2)^-2         density of omega_X

so that ``-Delta log(sigma_X) / 4 = omega``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class GridError(ValueError):
    """Invalid lattice parameters or incompatible fields."""


@dataclass(frozen=True)
class PolarGrid:
    """Cell-centred polar lattice on the disc of radius ``outer_radius``.

    Radial nodes sit at ``(i + 1/2) * dr`` so no node lies on the origin; the
    Dirichlet ring is the circle ``rho = outer_radius`` itself.
    """

    n_r: int
    n_theta: int
    outer_radius: float

    def __post_init__(self):
        if not 0.0 < self.outer_radius < 1.0:
            raise GridError(
                f"outer_radius={self.outer_radius} does not give a proper subdisc of D"
            )
        if self.n_r < 2:
            raise GridError("n_r must be at least 2")
        if self.n_theta < 8 or self.n_theta % 2:
            raise GridError("n_theta must be even and at least 8")

    @property
    def dr(self) -> float:
        return self.outer_radius / self.n_r

    @property
    def dtheta(self) -> float:
        return 2.0 * np.pi / self.n_theta

    @property
    def rho(self) -> np.ndarray:
        return (np.arange(self.n_r) + 0.5) * self.dr

    @property
    def theta(self) -> np.ndarray:
        return np.arange(self.n_theta) * self.dtheta

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_r, self.n_theta)

    @property
    def size(self) -> int:
        return self.n_r * self.n_theta

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinates ``(rho, theta)`` broadcast to ``shape``."""
        return np.meshgrid(self.rho, self.theta, indexing="ij")

    def z(self) -> np.ndarray:
        rho, theta = self.mesh()
        return rho * np.exp(1j * theta)

    def rho2d(self) -> np.ndarray:
        return np.broadcast_to(self.rho[:, None], self.shape)

    def area_weights(self) -> np.ndarray:
        """Polar area element ``rho * dr * dtheta`` per node."""
        return self.rho2d() * self.dr * self.dtheta

    def subgrid(self, n_r: int) -> "PolarGrid":
        """The nested grid made of the first ``n_r`` rings."""
        if not 2 <= n_r <= self.n_r:
            raise GridError(f"subgrid ring count {n_r} outside [2, {self.n_r}]")
        return PolarGrid(n_r, self.n_theta, n_r * self.dr)

    def ring_index(self, radius: float, atol: float = 1e-12) -> int:
        """Number of rings strictly inside ``radius``; ``radius`` must be a cell face."""
        k = radius / self.dr
        n = int(round(k))
        if abs(k - n) > atol * max(1.0, k):
            raise GridError(f"radius {radius} is not a lattice ring for dr={self.dr}")
        return n

    def nests_in(self, other: "PolarGrid") -> bool:
        return (
            self.n_theta == other.n_theta
            and self.n_r <= other.n_r
            and np.isclose(self.dr, other.dr, rtol=1e-13, atol=0.0)
        )


def make_grid(n_r: int, n_theta: int, outer_radius: float) -> PolarGrid:
    return PolarGrid(int(n_r), int(n_theta), float(outer_radius))


@dataclass
class ScalarField:
    grid: PolarGrid
    values: np.ndarray
    name: str = ""
    density: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise GridError(
                f"field shape {self.values.shape} does not match grid {self.grid.shape}"
            )
        if self.density and np.any(self.values < 0):
            raise GridError(f"density field {self.name!r} has negative values")

    def restrict(self, grid: PolarGrid) -> "ScalarField":
        """Prefix extraction onto a nested subgrid (bit exact)."""
        if not grid.nests_in(self.grid):
            raise GridError("target grid is not nested in the field's grid")
        return ScalarField(grid, self.values[: grid.n_r].copy(), self.name, self.density)


@dataclass(frozen=True)
class BackgroundGeometry:
    grid: PolarGrid
    sigma: np.ndarray = field(repr=False)
    omega: np.ndarray = field(repr=False)
    log_f: np.ndarray = field(repr=False)

    @property
    def log_sigma(self) -> np.ndarray:
        return 2.0 * self.log_f - np.log(2.0)

    def boundary_log_sigma(self) -> float:
        return sigma_log(self.grid.outer_radius)


def sigma_log(rho):
    """``log sigma_X`` as a function of radius."""
    return 2.0 * np.log1p(-np.square(rho)) - np.log(2.0)


def omega_density(rho):
    return 2.0 / np.square(1.0 - np.square(rho))


def background(grid: PolarGrid) -> BackgroundGeometry:
    rho = grid.rho2d()
    log_f = np.log1p(-rho**2)
    sigma = 0.5 * np.exp(2.0 * log_f)
    omega = 2.0 * np.exp(-2.0 * log_f)
    return BackgroundGeometry(grid, np.array(sigma), np.array(omega), np.array(log_f))


CLOSURES = ("cubic", "flux")

# cubic extrapolation to the ghost ring at R + dr/2 from (R, rho_l, rho_l - dr, rho_l - 2 dr)
_GHOST = (3.2, -3.0, 1.0, -0.2)


def _coefficients(grid: PolarGrid, closure: str):
    if closure not in CLOSURES:
        raise GridError(f"unknown closure {closure!r}; expected one of {CLOSURES}")
    h = grid.dr
    rho = grid.rho
    c_in = (rho - 0.5 * h) / (rho * h * h)
    c_out = (rho + 0.5 * h) / (rho * h * h)
    c_th = 1.0 / (rho**2 * grid.dtheta**2)
    if closure == "flux" or grid.n_r < 3:
        # boundary face at rho = R, half a spacing from the last ring
        c_out = c_out.copy()
        c_out[-1] = 2.0 * grid.outer_radius / (rho[-1] * h * h)
        return c_in, c_out, c_th, "flux"
    return c_in, c_out, c_th, "cubic"


def laplacian_matrix(grid: PolarGrid, closure: str = "cubic") -> tuple[sp.csr_matrix, np.ndarray]:
    """Sparse 5-point polar Laplacian and the coefficient of the Dirichlet data.

    Returns ``(L, b)`` with ``Delta u ~ L @ u.ravel() + b * g``; ``b`` vanishes
    off the outermost ring.  In the interior the stencil is the usual
    ``u_rr + u_r / rho + u_thth / rho^2``.  On the innermost ring the
    across-centre partner (theta + pi) carries the radial coefficient
    ``1/dr^2 - 1/(2 rho_0 dr)``, which is zero for ``rho_0 = dr/2``, so only the
    angular coupling survives there.

    Dirichlet data live on the circle ``rho = R``, half a spacing outside the
    last ring.  ``closure="cubic"`` fills the ghost ring at ``R + dr/2`` by
    cubic extrapolation through the data and the last three rings (exact on
    cubics, O(dr^2) truncation up to the boundary).  ``closure="flux"`` uses a
    boundary flux ``R (g - u_l) / (dr/2)``, which keeps ``diag(area) @ L``
    symmetric but has O(1) truncation on the last ring.
    """
    n_r, n_t = grid.shape
    c_in, c_out, c_th, kind = _coefficients(grid, closure)
    idx = np.arange(n_r * n_t).reshape(n_r, n_t)
    ones = np.ones(n_t)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(np.broadcast_to(v, r.shape).ravel())

    diag = -(c_in + c_out + 2.0 * c_th)
    add(idx[1:], idx[:-1], c_in[1:, None] * ones)
    add(idx[:-1], idx[1:], c_out[:-1, None] * ones)
    add(idx, np.roll(idx, 1, axis=1), c_th[:, None] * ones)
    add(idx, np.roll(idx, -1, axis=1), c_th[:, None] * ones)
    b = np.zeros(grid.shape)
    if kind == "cubic":
        wg, wl, wl1, wl2 = _GHOST
        co = c_out[-1]
        diag = diag.copy()
        diag[-1] += wl * co
        add(idx[-1], idx[-2], wl1 * co * ones)
        add(idx[-1], idx[-3], wl2 * co * ones)
        b[-1, :] = wg * co
    else:
        b[-1, :] = c_out[-1]
    add(idx, idx, diag[:, None] * ones)

    L = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    )
    L.sum_duplicates()
    return L, b


_LAPLACIAN_CACHE: dict = {}


def cached_laplacian(grid: PolarGrid, closure: str = "cubic") -> tuple[sp.csr_matrix, np.ndarray]:
    key = (grid, closure)
    if key not in _LAPLACIAN_CACHE:
        _LAPLACIAN_CACHE[key] = laplacian_matrix(grid, closure)
    return _LAPLACIAN_CACHE[key]


def apply_laplacian(
    grid: PolarGrid, values: np.ndarray, boundary: np.ndarray, closure: str = "cubic"
) -> np.ndarray:
    """Matrix-free application written in differences, so constants map to 0 exactly."""
    boundary = np.asarray(boundary, dtype=np.float64)
    if boundary.shape != (grid.n_theta,):
        raise GridError(
            f"boundary array has shape {boundary.shape}, expected ({grid.n_theta},)"
        )
    u = np.asarray(values, dtype=np.float64)
    if u.shape != grid.shape:
        raise GridError("field does not match the grid")
    c_in, c_out, c_th, kind = _coefficients(grid, closure)
    out = np.zeros_like(u)
    out[1:] += c_in[1:, None] * (u[:-1] - u[1:])
    out[:-1] += c_out[:-1, None] * (u[1:] - u[:-1])
    out += c_th[:, None] * ((np.roll(u, 1, axis=1) - u) + (np.roll(u, -1, axis=1) - u))
    last = u[-1]
    if kind == "cubic":
        wg, _, wl1, wl2 = _GHOST
        ghost_minus_last = wg * (boundary - last) + wl1 * (u[-2] - last) + wl2 * (u[-3] - last)
        out[-1] += c_out[-1] * ghost_minus_last
    else:
        out[-1] += c_out[-1] * (boundary - last)
    return out


def laplacian(f: ScalarField, boundary_values, closure: str = "cubic") -> ScalarField:
    boundary = np.asarray(boundary_values, dtype=np.float64)
    if np.ndim(boundary) == 0:
        boundary = np.full(f.grid.n_theta, float(boundary))
    return ScalarField(
        f.grid, apply_laplacian(f.grid, f.values, boundary, closure), f"lap({f.name})"
    )


# -- TODA1 field files -----------------------------------------------------

FORMAT_TAG = "TODA1"


def write_field(path, f: ScalarField) -> None:
    header = {
        "format": FORMAT_TAG,
        "n_r": f.grid.n_r,
        "n_theta": f.grid.n_theta,
        "outer_radius": f.grid.outer_radius,
        "name": f.name,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_field(path) -> ScalarField:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != FORMAT_TAG:
            raise GridError(f"{path}: not a {FORMAT_TAG} file")
        grid = make_grid(header["n_r"], header["n_theta"], header["outer_radius"])
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != grid.size:
        raise GridError(f"{path}: expected {grid.size} values, found {data.size}")
    return ScalarField(grid, data.reshape(grid.shape).astype(np.float64), header.get("name", ""))


def write_csv(path, f: ScalarField) -> None:
    rho, theta = f.grid.mesh()
    table = np.column_stack([rho.ravel(), theta.ravel(), f.values.ravel()])
    np.savetxt(Path(path), table, delimiter=",", header="rho,theta,value", comments="", fmt="%.17g")
