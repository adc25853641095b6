"""Finite-dimensional oracles for the pointwise linear-algebra lemmas.

A sample fixes positive reals ``H_1..H_{r-1}`` and a weight value ``phi``
(possibly ``-inf``); the degenerate entry is ``H_r = H_0 = e^{r phi} / prod H_j``.
Sums over ``j = 1..r`` are cyclic in ``(H_0, H_1, ..., H_{r-1})``.

Everything is vectorised over a leading sample axis.  Existential constants
(``delta`` in the epsilon-delta lemma, ``C_1`` in the s-perturbation lemma)
are estimated empirically and reported as such.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

PHI_RANGE = (-5.0, 5.0)
H_RANGE = (1e-3, 1e3)
NEG_INF_PROB = 0.2


class LemmaError(ValueError):
    pass


@dataclass
class LemmaSample:
    r: int
    H: np.ndarray
    phi: float
    s: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=np.float64)
        if self.r < 2 or self.H.shape != (self.r - 1,):
            raise LemmaError("H must hold r-1 entries")
        if np.any(self.H <= 0):
            raise LemmaError("H_j must be positive")
        if self.s is not None:
            self.s = np.asarray(self.s, dtype=np.float64)
            if self.s.shape != (self.r,) or np.any(self.s <= 0):
                raise LemmaError("s must hold r positive entries")
            if abs(np.prod(self.s) - 1.0) > 1e-12:
                raise LemmaError("prod s_j must equal 1")

    @property
    def H0(self) -> float:
        return float(h0(self.H[None], np.array([self.phi]))[0])

    def full(self) -> np.ndarray:
        """``(H_0, H_1, ..., H_{r-1})``."""
        return full_cycle(self.H[None], np.array([self.phi]))[0]


# -- vectorised kernels -----------------------------------------------------------

def h0(H: np.ndarray, phi: np.ndarray) -> np.ndarray:
    r = H.shape[1] + 1
    with np.errstate(over="ignore"):
        out = np.exp(r * phi - np.log(H).sum(axis=1))
    return np.where(np.isneginf(phi), 0.0, out)


def full_cycle(H: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return np.concatenate([h0(H, phi)[:, None], H], axis=1)


def cyclic_gap(V: np.ndarray) -> np.ndarray:
    """``sum_j (V_{j-1} - V_j)^2`` over the cycle."""
    return ((V - np.roll(V, 1, axis=1)) ** 2).sum(axis=1)


def lemma1_constant(r: int) -> float:
    return 1.0 / (r * r * (r - 1))


def lemma1_margins(H: np.ndarray, phi: np.ndarray) -> np.ndarray:
    r = H.shape[1] + 1
    C = lemma1_constant(r)
    V = full_cycle(H, phi)
    gap = cyclic_gap(V)
    finite = np.isfinite(phi)
    ephi = np.exp(np.where(finite, phi, 0.0))
    m_fin = gap - C * (V.sum(axis=1) - r * ephi) ** 2
    m_inf = gap - 2.0 * C * (V**2).sum(axis=1)
    return np.where(finite, m_fin, m_inf)


def lemma1_margin(sample: LemmaSample) -> float:
    return float(lemma1_margins(sample.H[None], np.array([sample.phi]))[0])


def lemma2_batch(H: np.ndarray, phi: np.ndarray, Hbar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(conforming, holds)``; non-conforming samples hold vacuously."""
    r = H.shape[1] + 1
    V = full_cycle(H, phi)
    total = V.sum(axis=1)
    conforming = (np.exp(phi) <= Hbar) & (total >= 2 * r * Hbar)
    holds = cyclic_gap(V) >= lemma1_constant(r) / 4.0 * total**2
    return conforming, holds | ~conforming


def lemma2_check(sample: LemmaSample, Hbar: float) -> bool:
    if Hbar <= 0:
        raise LemmaError("Hbar must be positive")
    _, ok = lemma2_batch(sample.H[None], np.array([sample.phi]), np.array([Hbar]))
    return bool(ok[0])


def lemma4_batch(H: np.ndarray, phi: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``Q = sum_{j=1}^r s_j^{-1} (s_{j+1} - s_j)^2 H_j`` (``s_{r+1} = s_1``, ``H_r = H_0``)."""
    V = full_cycle(H, phi)
    Hj = np.concatenate([V[:, 1:], V[:, :1]], axis=1)
    Q = ((np.roll(s, -1, axis=1) - s) ** 2 / s * Hj).sum(axis=1)
    dev = np.abs(s - 1.0).sum(axis=1)
    return Q, dev


def lemma4_probe(sample: LemmaSample, B: float, Cbound: float) -> tuple[float, float]:
    if sample.s is None:
        raise LemmaError("sample carries no s-vector")
    if np.any(sample.H > B):
        raise LemmaError(f"H_j exceeds B = {B}")
    if sample.s.sum() > Cbound:
        raise LemmaError(f"sum s_j exceeds C = {Cbound}")
    Q, dev = lemma4_batch(sample.H[None], np.array([sample.phi]), sample.s[None])
    return float(Q[0]), float(dev[0])


# -- sampling -------------------------------------------------------------------------

def sample_batch(rng: np.random.Generator, r: int, n: int,
                 neg_inf_prob: float = NEG_INF_PROB, H_range=H_RANGE) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = np.log(H_range[0]), np.log(H_range[1])
    H = np.exp(rng.uniform(lo, hi, size=(n, r - 1)))
    phi = rng.uniform(*PHI_RANGE, size=n)
    phi[rng.random(n) < neg_inf_prob] = -np.inf
    return H, phi


def conforming_lemma2(rng: np.random.Generator, r: int, n: int) -> tuple:
    """Samples with a valid ``Hbar`` in ``[e^phi, sum H / 2r]``, drawn log-uniformly."""
    Hs, phis, bars = [], [], []
    count = 0
    while count < n:
        H, phi = sample_batch(rng, r, 2 * n)
        total = full_cycle(H, phi).sum(axis=1)
        lo, hi = np.exp(phi), total / (2 * r)
        ok = (lo <= hi) & (hi > 0)
        lo_log = np.log(np.maximum(lo[ok], 1e-300))
        lo_log = np.maximum(lo_log, np.log(hi[ok]) - 20.0)
        bar = np.exp(rng.uniform(lo_log, np.log(hi[ok])))
        bar = np.clip(bar, lo[ok], hi[ok])
        Hs.append(H[ok]), phis.append(phi[ok]), bars.append(bar)
        count += int(ok.sum())
    return (np.concatenate(Hs)[:n], np.concatenate(phis)[:n], np.concatenate(bars)[:n])


# -- epsilon-delta search ----------------------------------------------------------------

def _simplex_ratio(x: np.ndarray) -> np.ndarray:
    return cyclic_gap(x) / x.sum(axis=1) ** 2


def _constraint_ok(x: np.ndarray, eps: float) -> np.ndarray:
    gm = np.exp(np.log(x).mean(axis=1))
    return x.min(axis=1) <= eps * gm


def lemma3_delta_search(r: int, epsilon: float, budget: int = 20000, seed: int = 0,
                        refine: int = 8) -> float:
    """Empirical ``inf sum (H_{j-1}-H_j)^2 / (sum H_j)^2`` subject to ``min H_j <= eps e^phi``.

    The ratio and the constraint are invariant under ``H -> tH, e^phi -> t e^phi``,
    so the search runs over the simplex ``sum x_j = 1`` (``x_r`` playing
    ``H_0``) with ``e^phi`` the geometric mean.  Random log-space draws are
    followed by Nelder-Mead polishing of the best few.
    """
    if not 0.0 < epsilon < 1.0:
        raise LemmaError("epsilon must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    y = rng.normal(scale=3.0, size=(budget, r))
    x = np.exp(y - y.max(axis=1, keepdims=True))
    x /= x.sum(axis=1, keepdims=True)
    ok = _constraint_ok(x, epsilon)
    if not ok.any():
        raise LemmaError("no admissible sample drawn; raise the budget")
    vals = np.where(ok, _simplex_ratio(x), np.inf)
    order = np.argsort(vals)[:refine]
    best = float(vals[order[0]])

    def objective(z):
        p = np.exp(z - z.max())
        p = (p / p.sum())[None]
        if not _constraint_ok(p, epsilon)[0]:
            return 10.0
        return float(_simplex_ratio(p)[0])

    for i in order:
        res = optimize.minimize(objective, y[i], method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000 * r})
        best = min(best, float(res.fun))
    return best


def lemma3_exact_r2(epsilon: float) -> float:
    """Closed form of the infimum for ``r = 2``."""
    return 2.0 * ((1.0 - epsilon**2) / (1.0 + epsilon**2)) ** 2


# -- suite -------------------------------------------------------------------------

def q_zero_samples(rng: np.random.Generator, r: int, n: int):
    """Samples forced to ``Q = 0``: a constant s-vector normalised to ``prod s = 1``."""
    H, phi = sample_batch(rng, r, n)
    c = np.exp(rng.uniform(-3, 3, size=(n, 1)))
    s = np.repeat(c, r, axis=1)
    s = s / np.exp(np.log(s).mean(axis=1, keepdims=True))
    return H, phi, s


def lemma4_fit(rng: np.random.Generator, r: int, n: int, B: float = 10.0, Cbound: float = 10.0) -> dict:
    """Empirical modulus ``C1_hat = max deviation / sqrt(Q)`` over small perturbations.

    The sup is what the lemma bounds; for ``r = 2`` it tends to
    ``1/sqrt(min H)``, so it is governed by the lower end of the H range.
    """
    H, phi = sample_batch(rng, r, n, H_range=(H_RANGE[0], B))
    scale = np.exp(rng.uniform(np.log(1e-4), np.log(1e-1), size=(n, 1)))
    t = rng.normal(size=(n, r)) * scale
    t -= t.mean(axis=1, keepdims=True)
    s = np.exp(t)
    keep = s.sum(axis=1) <= Cbound
    Q, dev = lemma4_batch(H[keep], phi[keep], s[keep])
    ratio = dev / np.sqrt(Q)
    return {"C1_hat": float(ratio.max()), "q99": float(np.quantile(ratio, 0.99)),
            "n": int(keep.sum()), "B": B, "C": Cbound}


def run_suite(samples: int = 100_000, seed: int = 0, ranks=(2, 3, 4, 5, 6),
              epsilons=(0.25, 0.5, 0.75), zero_samples: int = 10_000, delta_budget: int = 20000) -> dict:
    rng = np.random.default_rng(seed)
    out = {"seed": seed, "samples": samples, "ranks": {}}
    for r in ranks:
        H, phi = sample_batch(rng, r, samples)
        m = lemma1_margins(H, phi)
        fin = np.isfinite(phi)
        V = full_cycle(H, phi)
        ratio = cyclic_gap(V) / V.sum(axis=1) ** 2
        Hc, pc, bar = conforming_lemma2(rng, r, samples)
        conf, holds = lemma2_batch(Hc, pc, bar)
        Hz, pz, sz = q_zero_samples(rng, r, zero_samples)
        Qz, dz = lemma4_batch(Hz, pz, sz)
        out["ranks"][str(r)] = {
            "lemma1_min_margin_finite": float(m[fin].min()),
            "lemma1_min_margin_neg_inf": float(m[~fin].min()),
            "lemma1_min_ratio": float(ratio.min()),
            "lemma2_conforming": int(conf.sum()),
            "lemma2_violations": int((~holds).sum()),
            "lemma3_delta_hat": {str(e): lemma3_delta_search(r, e, delta_budget, seed) for e in epsilons},
            "lemma4_zero_max_Q": float(Qz.max()),
            "lemma4_zero_max_deviation": float(dz.max()),
            "lemma4_fit": lemma4_fit(rng, r, samples),
        }
    return out


def suite_passed(summary: dict, margin_tol: float = 1e-12, zero_tol: float = 1e-12) -> bool:
    for rep in summary["ranks"].values():
        if rep["lemma1_min_margin_finite"] < -margin_tol or rep["lemma1_min_margin_neg_inf"] < -margin_tol:
            return False
        if rep["lemma2_violations"]:
            return False
        if not all(d > 0 for d in rep["lemma3_delta_hat"].values()):
            return False
        if rep["lemma4_zero_max_Q"] > zero_tol or rep["lemma4_zero_max_deviation"] > zero_tol:
            return False
    return True
