"""Subharmonic weights on the disc and their radial mollifications.

A weight ``phi`` is the potential of the singular metric ``e^{-phi} h_X`` on
the canonical bundle.  The PDE only sees the density

    E = e^{r phi} sigma_X^{-r}  (= |q|^2 for phi = (1/r) log |q|^2_{h_X}),

so zeros of ``q`` are plain zeros of a smooth field.  Every model splits
``phi`` into a subharmonic singular part (sums of ``log|z - a|``) and a smooth
remainder; mollification acts on the singular part only, which keeps the
family monotone in the radius and leaves harmonic pieces untouched.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate

from .geometry import (
    BackgroundGeometry,
    GridError,
    PolarGrid,
    ScalarField,
    apply_laplacian,
    omega_density,
    read_field,
    sigma_log,
)

NEG_INF = -np.inf
QUAD_TOL = 1e-8


class WeightError(ValueError):
    pass


# -- radial bump ------------------------------------------------------------

def _bump(t):
    t = np.asarray(t, dtype=np.float64)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(1.0 / (t[inside] ** 2 - 1.0))
    return out


@functools.lru_cache(maxsize=None)
def _bump_mass() -> float:
    """``2 pi * int_0^1 K(t) t dt`` so that ``K(|x|/d) / (d^2 mass)`` has unit mass."""
    val, _ = integrate.quad(lambda t: float(_bump(t)) * t, 0.0, 1.0, epsabs=1e-15, epsrel=1e-13)
    return 2.0 * np.pi * val


def bump_density(s, delta: float):
    """Normalised bump of radius ``delta`` evaluated at distance ``s``."""
    return _bump(np.asarray(s) / delta) / (delta * delta * _bump_mass())


def _inner_mass(sig: float) -> float:
    """Mass of the normalised unit bump inside radius ``sig``."""
    if sig >= 1.0:
        return 1.0
    val, _ = integrate.quad(lambda t: float(_bump(t)) * t, 0.0, sig, epsabs=1e-15, epsrel=1e-13)
    return 2.0 * np.pi * val / _bump_mass()


def _outer_log_moment(sig: float) -> float:
    if sig >= 1.0:
        return 0.0
    val, _ = integrate.quad(
        lambda t: float(_bump(t)) * t * np.log(t) if t > 0 else 0.0,
        sig, 1.0, epsabs=1e-15, epsrel=1e-13, limit=200,
    )
    return 2.0 * np.pi * val / _bump_mass()


def mollified_log_distance(s, delta: float) -> np.ndarray:
    """Bump average of ``log|. - a|`` at distance ``s = |z - a|``.

    Uses the circle means ``max(log s, log t)`` of ``log|. - a|``, so only a
    radial integral is needed.  Equals ``log s`` for ``s >= delta``.
    """
    s = np.asarray(s, dtype=np.float64)
    out = np.empty_like(s)
    far = s >= delta
    with np.errstate(divide="ignore"):
        out[far] = np.log(s[far])
    near = np.flatnonzero(~far)
    flat = out.reshape(-1)
    sflat = s.reshape(-1)
    cache: dict[float, float] = {}
    for i in near:
        si = float(sflat[i])
        if si not in cache:
            sig = si / delta
            m = _inner_mass(sig)
            logs = np.log(si) * m if si > 0 else 0.0
            cache[si] = logs + np.log(delta) * (1.0 - m) + _outer_log_moment(sig)
        flat[i] = cache[si]
    return out


# -- models -----------------------------------------------------------------

def _as_points(z) -> np.ndarray:
    return np.asarray(z, dtype=np.complex128)


def _poly2(coeffs: np.ndarray, x, y):
    """``sum c[i, j] x^i y^j``."""
    return np.polynomial.polynomial.polyval2d(x, y, coeffs)


def _poly2_laplacian(coeffs: np.ndarray) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    dxx = np.polynomial.polynomial.polyder(c, 2, axis=0)
    dyy = np.polynomial.polynomial.polyder(c, 2, axis=1)
    n = max(dxx.shape[0], dyy.shape[0]), max(dxx.shape[1], dyy.shape[1])
    out = np.zeros(n)
    out[: dxx.shape[0], : dxx.shape[1]] += dxx
    out[: dyy.shape[0], : dyy.shape[1]] += dyy
    return out


@dataclass(frozen=True)
class WeightModel:
    """Base class.  Subclasses provide the singular/smooth split of ``phi``."""

    r: int

    kind = "abstract"

    def __post_init__(self):
        if self.r < 2:
            raise WeightError("rank r must be >= 2")

    # pieces of phi at arbitrary points of the disc
    def atoms(self) -> list[tuple[complex, float]]:
        """Singular part as ``[(centre, mass)]``: ``sum mass * log|z - centre|``."""
        return []

    def smooth(self, z) -> np.ndarray:
        raise NotImplementedError

    def smooth_laplacian(self, z) -> np.ndarray:
        raise NotImplementedError

    def singular(self, z) -> np.ndarray:
        z = _as_points(z)
        out = np.zeros(z.shape)
        with np.errstate(divide="ignore"):
            for a, m in self.atoms():
                out += m * np.log(np.abs(z - a))
        return out

    def singular_laplacian(self, z) -> np.ndarray:
        """Absolutely continuous part of the Laplacian of the singular piece."""
        return np.zeros(np.shape(z))

    def phi_at(self, z) -> np.ndarray:
        return self.singular(z) + self.smooth(z)

    def log_E_at(self, z) -> np.ndarray:
        z = _as_points(z)
        return self.r * (self.phi_at(z) - sigma_log(np.abs(z)))

    def E_at(self, z) -> np.ndarray:
        return np.exp(self.log_E_at(z))

    def to_spec(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class ZeroWeight(WeightModel):
    """``phi = -inf``: the q = 0 case."""

    kind = "zero"

    def smooth(self, z):
        return np.full(np.shape(z), NEG_INF)

    def smooth_laplacian(self, z):
        return np.zeros(np.shape(z))

    def phi_at(self, z):
        return np.full(np.shape(z), NEG_INF)

    def E_at(self, z):
        return np.zeros(np.shape(z))

    def log_E_at(self, z):
        return np.full(np.shape(z), NEG_INF)

    def to_spec(self):
        return {"kind": "zero", "r": self.r}


@dataclass(frozen=True)
class DifferentialWeight(WeightModel):
    """``phi_q = (1/r) log |q|^2_{h_X}`` for the polynomial r-differential ``q(z) dz^r``."""

    coeffs: tuple = ()
    kind = "differential"

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "coeffs", tuple(complex(c) for c in self.coeffs))

    @property
    def is_zero(self) -> bool:
        return all(c == 0 for c in self.coeffs)

    def q(self, z) -> np.ndarray:
        z = _as_points(z)
        out = np.zeros(z.shape, dtype=np.complex128)
        for c in reversed(self.coeffs):
            out = out * z + c
        return out

    def roots(self) -> np.ndarray:
        c = np.trim_zeros(np.array(self.coeffs, dtype=np.complex128), "b")
        if c.size <= 1:
            return np.array([], dtype=np.complex128)
        return np.roots(c[::-1])

    def leading(self) -> complex:
        c = np.trim_zeros(np.array(self.coeffs, dtype=np.complex128), "b")
        return complex(c[-1]) if c.size else 0.0

    def atoms(self):
        return [(complex(a), 2.0 / self.r) for a in self.roots()]

    def smooth(self, z):
        z = _as_points(z)
        lead = abs(self.leading())
        if lead == 0:
            return np.full(z.shape, NEG_INF)
        return (2.0 / self.r) * np.log(lead) + sigma_log(np.abs(z))

    def smooth_laplacian(self, z):
        return -4.0 * omega_density(np.abs(_as_points(z)))

    def E_at(self, z):
        return np.abs(self.q(z)) ** 2

    def log_E_at(self, z):
        with np.errstate(divide="ignore"):
            return np.log(self.E_at(z))

    def phi_at(self, z):
        z = _as_points(z)
        with np.errstate(divide="ignore"):
            return self.log_E_at(z) / self.r + sigma_log(np.abs(z))

    def to_spec(self):
        return {
            "kind": "differential",
            "r": self.r,
            "coeffs": [[c.real, c.imag] for c in self.coeffs],
        }


@dataclass(frozen=True)
class AtomWeight(WeightModel):
    """``phi = sum m_k log|z - a_k| + P(x, y)`` with a real polynomial ``P``."""

    centres: tuple = ()
    masses: tuple = ()
    poly: tuple = ((0.0,),)
    kind = "atoms"

    def __post_init__(self):
        super().__post_init__()
        centres = tuple(complex(a) for a in self.centres)
        masses = tuple(float(m) for m in self.masses)
        if len(centres) != len(masses):
            raise WeightError("centres and masses differ in length")
        if any(abs(a) >= 1.0 for a in centres):
            raise WeightError("atom centres must lie in the open unit disc")
        if any(m <= 0 for m in masses):
            raise WeightError("atom masses must be positive")
        poly = np.atleast_2d(np.asarray(self.poly, dtype=np.float64))
        object.__setattr__(self, "centres", centres)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "poly", tuple(map(tuple, poly)))

    @property
    def poly_array(self) -> np.ndarray:
        return np.asarray(self.poly, dtype=np.float64)

    def atoms(self):
        return list(zip(self.centres, self.masses))

    def smooth(self, z):
        z = _as_points(z)
        return _poly2(self.poly_array, z.real, z.imag)

    def smooth_laplacian(self, z):
        z = _as_points(z)
        return _poly2(_poly2_laplacian(self.poly_array), z.real, z.imag) + np.zeros(z.shape)

    def to_spec(self):
        return {
            "kind": "atoms",
            "r": self.r,
            "atoms": [[a.real, a.imag, m] for a, m in self.atoms()],
            "smooth": [list(row) for row in self.poly],
        }


@dataclass(frozen=True)
class SampledWeight(WeightModel):
    """``phi`` known only at the nodes of one lattice."""

    field: ScalarField | None = None
    source: str = ""
    kind = "samples"

    def _match(self, z) -> np.ndarray:
        if self.field is None:
            raise WeightError("sampled weight without data")
        z = _as_points(z)
        if z.shape != self.field.grid.shape or not np.allclose(z, self.field.grid.z(), atol=1e-14):
            raise GridError("sampled weight evaluated off its own lattice")
        return self.field.values

    def phi_at(self, z):
        return self._match(z)

    def smooth(self, z):
        return self._match(z)

    def smooth_laplacian(self, z):
        raise WeightError("sampled weights have no analytic Laplacian")

    def to_spec(self):
        return {"kind": "samples", "r": self.r, "file": self.source}


@dataclass(frozen=True)
class MollifiedWeight(WeightModel):
    """Bump average of ``base``'s singular part at radius ``delta``; smooth part kept."""

    base: WeightModel | None = None
    delta: float = 0.0
    kind = "mollified"

    def __post_init__(self):
        super().__post_init__()
        if self.delta <= 0:
            raise WeightError("mollifier radius must be positive")
        if self.base is None or isinstance(self.base, (SampledWeight, MollifiedWeight)):
            raise WeightError("mollify acts on analytic weights; nest radii on the base instead")

    def atoms(self):
        return self.base.atoms()

    def singular(self, z):
        z = _as_points(z)
        out = np.zeros(z.shape)
        for a, m in self.atoms():
            out += m * mollified_log_distance(np.abs(z - a), self.delta)
        return out

    def singular_laplacian(self, z):
        z = _as_points(z)
        out = np.zeros(z.shape)
        for a, m in self.atoms():
            out += m * 2.0 * np.pi * bump_density(np.abs(z - a), self.delta)
        return out

    def smooth(self, z):
        return self.base.smooth(z)

    def smooth_laplacian(self, z):
        return self.base.smooth_laplacian(z)

    def phi_at(self, z):
        return self.singular(z) + self.smooth(z)

    def to_spec(self):
        return {"kind": "mollified", "r": self.r, "delta": self.delta, "base": self.base.to_spec()}


# -- constructors and operations ---------------------------------------------

def differential(coeffs, r: int) -> WeightModel:
    w = DifferentialWeight(r, tuple(coeffs))
    return ZeroWeight(r) if w.is_zero else w


def log_atoms(atoms, r: int, smooth=((0.0,),)) -> AtomWeight:
    atoms = list(atoms)
    return AtomWeight(r, tuple(a for a, _ in atoms), tuple(m for _, m in atoms), smooth)


def zero(r: int) -> ZeroWeight:
    return ZeroWeight(r)


def samples(f: ScalarField, r: int, source: str = "") -> SampledWeight:
    return SampledWeight(r, f, source)


def _complex(c) -> complex:
    if isinstance(c, (list, tuple)):
        return complex(c[0], c[1])
    return complex(c)


def from_spec(spec: dict, base_dir: Path | None = None) -> WeightModel:
    kind = spec.get("kind")
    r = int(spec.get("r", 2))
    if kind == "zero":
        return zero(r)
    if kind == "differential":
        return differential([_complex(c) for c in spec["coeffs"]], r)
    if kind == "atoms":
        atoms = [(complex(a[0], a[1]), float(a[2])) for a in spec.get("atoms", [])]
        return log_atoms(atoms, r, spec.get("smooth", [[0.0]]))
    if kind == "samples":
        path = Path(spec["file"])
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return samples(read_field(path), r, str(spec["file"]))
    if kind == "mollified":
        return MollifiedWeight(r, from_spec(spec["base"], base_dir), float(spec["delta"]))
    raise WeightError(f"unknown weight kind {kind!r}")


def _nodes(weight: WeightModel, grid: PolarGrid) -> np.ndarray:
    if isinstance(weight, SampledWeight) and weight.field is not None:
        if weight.field.grid != grid:
            raise GridError("sampled weight lives on a different lattice")
    return grid.z()


def eval_E(weight: WeightModel, grid: PolarGrid, bg: BackgroundGeometry | None = None) -> ScalarField:
    E = weight.E_at(_nodes(weight, grid))
    E = np.where(np.isfinite(E), E, 0.0)
    return ScalarField(grid, np.maximum(E, 0.0), "E", density=True)


def boundary_E(weight: WeightModel, grid: PolarGrid) -> np.ndarray:
    """E on the Dirichlet circle ``|z| = R`` at the lattice angles."""
    z = grid.outer_radius * np.exp(1j * grid.theta)
    return np.maximum(weight.E_at(z), 0.0)


def eval_phi(weight: WeightModel, grid: PolarGrid, bg: BackgroundGeometry | None = None) -> ScalarField:
    """``phi`` at the nodes; ``-inf`` marks the zeros of ``E``."""
    phi = weight.phi_at(_nodes(weight, grid))
    return ScalarField(grid, phi, "phi")


def sampled_E(phi: ScalarField, r: int) -> ScalarField:
    """E from sampled ``phi`` (the inverse of :func:`eval_phi`)."""
    with np.errstate(invalid="ignore"):
        logE = r * (phi.values - sigma_log(phi.grid.rho2d()))
    return ScalarField(phi.grid, np.exp(logE), "E", density=True)


def mollify(weight: WeightModel, delta: float, grid: PolarGrid | None = None,
            bg: BackgroundGeometry | None = None) -> MollifiedWeight:
    if delta <= 0:
        raise WeightError("delta must be positive")
    if grid is not None and grid.outer_radius + delta >= 1.0:
        raise WeightError(
            f"lattice radius {grid.outer_radius} + delta {delta} leaves the unit disc"
        )
    if isinstance(weight, MollifiedWeight):
        raise WeightError("mollify the base weight with the new radius instead")
    if isinstance(weight, SampledWeight):
        raise WeightError("sampled weights carry no singular/smooth split to mollify")
    return MollifiedWeight(weight.r, weight, float(delta))


@dataclass
class SemipositivityReport:
    passed: bool
    tol: float
    min_margin: float
    violations: list = field(default_factory=list)
    method: str = "analytic"

    def to_dict(self):
        return {
            "passed": self.passed,
            "tol": self.tol,
            "min_margin": self.min_margin,
            "violations": self.violations[:50],
            "n_violations": len(self.violations),
            "method": self.method,
        }


def validate_semipositivity(weight: WeightModel, grid: PolarGrid,
                            bg: BackgroundGeometry | None = None) -> SemipositivityReport:
    """Check ``Delta phi / 4 + omega >= -tol`` node by node.

    Analytic Laplacians are used wherever the model has them (point masses
    contribute only at their centres, which are positive anyway); sampled
    weights fall back to the discrete Laplacian with boundary values taken
    from the outermost ring.
    """
    z = grid.z()
    omega = omega_density(np.abs(z))
    tol = 1e-8 * float(omega.max())
    if isinstance(weight, ZeroWeight):
        margin = omega.copy()
        method = "analytic"
    elif isinstance(weight, SampledWeight):
        vals = weight.field.values
        if not np.all(np.isfinite(vals)):
            raise WeightError("sampled weight is not finite; mollify first")
        lap = apply_laplacian(grid, vals, vals[-1].copy())
        margin = lap / 4.0 + omega
        method = "discrete"
    else:
        lap = weight.smooth_laplacian(z) + weight.singular_laplacian(z)
        margin = lap / 4.0 + omega
        method = "analytic"
    bad = np.argwhere(margin < -tol)
    violations = [
        {"i": int(i), "k": int(k), "margin": float(margin[i, k])} for i, k in bad
    ]
    return SemipositivityReport(not violations, tol, float(margin.min()), violations, method)


def sup_exp_phi(weight: WeightModel, grid: PolarGrid) -> tuple[float, bool]:
    """``M_phi = max e^phi`` over the nodes and an unbounded-growth flag.

    The flag is raised when the maximum sits on the outermost ring and grows
    from the previous ring faster than ``(1 - rho)^{-1/2}`` would.
    """
    phi = eval_phi(weight, grid).values
    with np.errstate(over="ignore"):
        ring_max = np.exp(np.max(phi, axis=1))
    M = float(ring_max.max())
    if not np.isfinite(M):
        return np.inf, True
    rho = grid.rho
    grows = ring_max[-1] >= M and ring_max[-2] > 0
    if grows:
        rate = np.log(ring_max[-1] / ring_max[-2]) / grid.dr
        grows = rate > 0.5 / (1.0 - rho[-1])
    return (np.inf if grows else M), bool(grows)


def dump_spec(weight: WeightModel) -> str:
    return json.dumps(weight.to_spec(), sort_keys=True)
