"""``toda`` command line: solve, exhaust, mollify, probe-uniqueness, verify,
lemmas, export.

Runs are described by a JSON config; flags only override config keys.
Every run writes ``manifest.json`` with the resolved config.  Artifacts
carry no timings or timestamps, so a rerun with the same config and seed
reproduces them byte for byte (timings go to stderr).

Exit codes: 0 success, 1 solver non-convergence, 2 config error,
3 verification failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, lemma_lab, solver, storage, weights
from .geometry import GridError, ScalarField, make_grid, write_csv
from .toda_core import exact_flat, exact_hyperbolic, jacobian, lambda_from_cartan, lambda_vector, residual

COMMANDS = ("solve", "exhaust", "mollify", "probe-uniqueness", "verify", "lemmas", "export")
STAGED = ("exhaust", "probe-uniqueness")
SUITES = ("exact", "bounds", "lemmas", "all")
EXIT_OK, EXIT_NONCONVERGENCE, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3

DEFAULTS = {
    "command": None,
    "r": 2,
    "weight": {"kind": "zero"},
    "lattice": {"n_r": 64, "n_theta": 128, "outer_radius": 0.8, "refine": 1},
    "stages": 6,
    "boundary": {"kind": "lm", "factor": 1.0},
    "scheme": "newton",
    "tolerances": {"newton_tol": 1e-10, "max_newton": 50, "linear_tol": 1e-12, "max_monotone": 20000},
    "deltas": [0.16, 0.08, 0.04, 0.02],
    "seeds": [1.0, 1.5],
    "beta": [1.0],
    "compact_radius": 0.5,
    "output": "toda_out",
    "seed": 0,
    "samples": 100000,
    "suite": "exact",
    "input": None,
    "heatmaps": False,
}

_NUM = (int, float)
SCHEMA = {
    "command": (str, type(None)),
    "r": int,
    "weight": dict,
    "lattice": {"n_r": int, "n_theta": int, "outer_radius": _NUM, "refine": int},
    "stages": int,
    "boundary": {"kind": str, "factor": _NUM},
    "scheme": str,
    "tolerances": {"newton_tol": _NUM, "max_newton": int, "linear_tol": _NUM, "max_monotone": int},
    "deltas": list,
    "seeds": list,
    "beta": list,
    "compact_radius": _NUM,
    "output": str,
    "seed": int,
    "samples": int,
    "suite": str,
    "input": (str, type(None)),
    "heatmaps": bool,
}

WEIGHT_KEYS = {
    "zero": {"kind", "r"},
    "differential": {"kind", "r", "coeffs"},
    "atoms": {"kind", "r", "atoms", "smooth"},
    "samples": {"kind", "r", "file"},
}
BOUNDARY_KINDS = ("lm", "exact_hyperbolic", "flat")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _check_type(value, expected, path):
    if expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is bool:
        ok = isinstance(value, bool)
    elif isinstance(expected, tuple) and int in expected:
        ok = isinstance(value, expected) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(path, f"expected {getattr(expected, '__name__', expected)}, got {type(value).__name__}")


def _merge(user: dict, schema: dict, defaults: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        kp = f"{path}.{key}"
        if key not in schema:
            raise ConfigError(kp, "unknown key")
        sub = schema[key]
        if isinstance(sub, dict):
            if not isinstance(value, dict):
                raise ConfigError(kp, "expected an object")
            out[key] = _merge(value, sub, defaults[key], kp)
        else:
            _check_type(value, sub, kp)
            out[key] = value
    return out


def _validate_weight(spec: dict, r: int) -> dict:
    kind = spec.get("kind")
    if kind not in WEIGHT_KEYS:
        raise ConfigError("$.weight.kind", f"unknown weight kind {kind!r}")
    for key in spec:
        if key not in WEIGHT_KEYS[kind]:
            raise ConfigError(f"$.weight.{key}", f"unknown key for weight kind {kind!r}")
    if "r" in spec and spec["r"] != r:
        raise ConfigError("$.weight.r", f"rank {spec['r']} disagrees with $.r = {r}")
    return {**spec, "r": r}


def parse_config(text: str, overrides: dict | None = None) -> dict:
    """Validate a JSON config, fill defaults, and apply flag overrides."""
    try:
        user = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("$", "top level must be an object")
    cfg = _merge(user, SCHEMA, DEFAULTS, "$")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node, parts = cfg, key.split(".")
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    cfg["_user_keys"] = sorted(user.get("lattice", {}).keys())
    if cfg["command"] is not None and cfg["command"] not in COMMANDS:
        raise ConfigError("$.command", f"unknown command {cfg['command']!r}")
    if cfg["r"] < 2:
        raise ConfigError("$.r", "rank must be >= 2")
    if cfg["scheme"] not in solver.SCHEMES:
        raise ConfigError("$.scheme", f"expected one of {solver.SCHEMES}")
    if cfg["suite"] not in SUITES:
        raise ConfigError("$.suite", f"expected one of {SUITES}")
    if cfg["boundary"]["kind"] not in BOUNDARY_KINDS:
        raise ConfigError("$.boundary.kind", f"expected one of {BOUNDARY_KINDS}")
    if cfg["stages"] < 2:
        raise ConfigError("$.stages", "need at least 2 stages")
    if any(b == 0 for b in cfg["beta"]):
        raise ConfigError("$.beta", "beta must be nonzero")
    if len(cfg["seeds"]) != 2:
        raise ConfigError("$.seeds", "exactly two seed factors are required")
    cfg["weight"] = _validate_weight(cfg["weight"], cfg["r"])
    if cfg["weight"]["kind"] != "samples":
        try:
            weights.from_spec(cfg["weight"])
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ConfigError("$.weight", f"invalid weight: {exc!r}") from exc
    try:
        solver.check_schedule(cfg["deltas"])
        lat = cfg["lattice"]
        make_grid(lat["n_r"], lat["n_theta"], lat["outer_radius"])
        if cfg["command"] in STAGED:
            _master(cfg)
    except ConfigError:
        raise
    except (GridError, ValueError) as exc:
        path = "$.deltas" if "mollifier" in str(exc) else "$.lattice"
        raise ConfigError(path, str(exc)) from exc
    return cfg


def _master(cfg: dict):
    """Master lattice for staged runs; explicit ``n_r``/``outer_radius`` must nest every stage."""
    lat, I = cfg["lattice"], cfg["stages"]
    if {"n_r", "outer_radius"} & set(cfg.get("_user_keys", [])):
        g = make_grid(lat["n_r"], lat["n_theta"], lat["outer_radius"])
        if g.outer_radius < solver.stage_radius(I) - 1e-12:
            raise ConfigError("$.lattice.outer_radius", f"master radius below the last stage radius {solver.stage_radius(I)}")
        for i in range(2, I + 1):
            try:
                g.ring_index(solver.stage_radius(i))
            except GridError as exc:
                raise ConfigError("$.lattice", f"stage {i} radius is not a lattice ring: {exc}") from exc
        return g.subgrid(g.ring_index(solver.stage_radius(I)))
    return solver.master_lattice(I, lat["n_theta"], lat["refine"])


# -- helpers ---------------------------------------------------------------------------

def _opts(cfg: dict) -> solver.SolveOptions:
    t = cfg["tolerances"]
    return solver.SolveOptions(newton_tol=t["newton_tol"], max_newton=t["max_newton"],
                               linear_tol=t["linear_tol"], max_monotone=t["max_monotone"],
                               scheme=cfg["scheme"])


def _weight(cfg: dict, base_dir: Path | None = None):
    return weights.from_spec(cfg["weight"], base_dir)


def _grid(cfg: dict):
    lat = cfg["lattice"]
    return make_grid(lat["n_r"], lat["n_theta"], lat["outer_radius"])


def _boundary(cfg: dict, w, grid):
    b = cfg["boundary"]
    if b["kind"] == "lm":
        return solver.boundary_seed(grid, cfg["r"], b["factor"])
    if b["kind"] == "exact_hyperbolic":
        return exact_hyperbolic(cfg["r"], grid).boundary
    E_ring = weights.boundary_E(w, grid)
    if np.any(E_ring <= 0):
        raise ConfigError("$.boundary.kind", "flat trace needs E > 0 on the boundary circle")
    return np.repeat((np.log(E_ring) / cfg["r"])[None], cfg["r"] - 1, axis=0)


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not serialisable: {type(x).__name__}")


def _strip_timing(rep: dict) -> dict:
    rep = dict(rep)
    rep.pop("wall_time", None)
    return rep


def _state_summary(state, w, cfg) -> dict:
    M, unbounded = weights.sup_exp_phi(w, state.grid)
    out = {"M_phi": None if unbounded else M, "M_phi_unbounded": unbounded,
           "reality_defect": float(np.max(np.abs(state.u - state.u[::-1])))}
    if not unbounded:
        out["bounds"] = analysis.check_volume_bounds(state, M).to_dict()
        out["inequalities"] = [i.to_dict() for i in analysis.check_master_inequalities(state, M)]
    out["khn"] = analysis.check_khn(state).summary()
    out["thermo"] = [analysis.thermo(state, b).summary() for b in cfg["beta"]]
    return out


def heatmap(path: Path, f: ScalarField, scale: str = "linear", size: int = 256) -> None:
    """Cartesian raster of a polar field by nearest-node lookup (outside the disc is blank)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    g = f.grid
    R = g.outer_radius
    x = np.linspace(-R, R, size)
    X, Y = np.meshgrid(x, x[::-1])
    rho, th = np.hypot(X, Y), np.mod(np.arctan2(Y, X), 2 * np.pi)
    i = np.clip((rho / g.dr).astype(int), 0, g.n_r - 1)
    k = np.mod(np.rint(th / g.dtheta).astype(int), g.n_theta)
    img = f.values[i, k].astype(float)
    if scale == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            img = np.log10(img)
    img[rho >= R] = np.nan
    img[~np.isfinite(img)] = np.nan
    path.parent.mkdir(parents=True, exist_ok=True)
    plt.imsave(path, np.ma.masked_invalid(img), cmap="viridis", format="png", metadata={"Software": None})


def _export_fields(state, out: Path, betas, pngs: bool) -> list:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    fields = [(ScalarField(state.grid, state.u[j], f"u_{j + 1}"), "linear") for j in range(state.r - 1)]
    fields.append((ScalarField(state.grid, state.E, "E", density=True), "log"))
    for b in betas:
        th = analysis.thermo(state, b)
        fields.append((ScalarField(state.grid, th.S, f"S_beta{b:g}"), "linear"))
        fields.append((ScalarField(state.grid, th.F, f"F_beta{b:g}"), "linear"))
    for f, scale in fields:
        write_csv(out / f"{f.name}.csv", f)
        written.append(f"{f.name}.csv")
        if pngs:
            heatmap(out / f"{f.name}.png", f, scale)
            written.append(f"{f.name}.png")
    return written


# -- commands ---------------------------------------------------------------------------

def cmd_solve(cfg: dict, out: Path) -> int:
    w = _weight(cfg)
    g = _grid(cfg)
    bnd = _boundary(cfg, w, g)
    try:
        state, rep = solver.solve_dirichlet(w, g, bnd, _opts(cfg))
    except solver.NonConvergence as exc:
        _dump(out / "report.json", {"status": "nonconvergence", "message": str(exc),
                                     "solve": _strip_timing(exc.report.to_dict())})
        return EXIT_NONCONVERGENCE
    print(f"solve: {rep.iterations} iterations in {rep.wall_time:.2f}s", file=sys.stderr)
    storage.save_state(state, out / "state", weights.from_spec(cfg["weight"]).to_spec(), cfg["boundary"])
    report = {"status": "ok", "solve": _strip_timing(rep.to_dict()), "analysis": _state_summary(state, w, cfg)}
    _dump(out / "report.json", report)
    if cfg["heatmaps"]:
        _export_fields(state, out / "fields", cfg["beta"], True)
    return EXIT_OK


def _stage_table(path: Path, run) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["stage", "radius", "iterations", "monotone_margin", "compact_diff", "khn_passed"])
        diffs = [None] * (len(run.states) - len(run.compact_diffs)) + list(run.compact_diffs)
        margins = [None] + list(run.monotonicity.get("margins", []))
        for idx, st in enumerate(run.states):
            wr.writerow([st.meta.get("stage"), repr(st.grid.outer_radius), run.reports[idx].iterations,
                         "" if margins[idx] is None else repr(margins[idx]),
                         "" if diffs[idx] is None else repr(diffs[idx]), run.khn[idx]["passed"]])


def cmd_exhaust(cfg: dict, out: Path) -> int:
    w = _weight(cfg)
    run = solver.run_exhaustion(w, cfg["stages"], _master(cfg), _opts(cfg),
                                density_factor=cfg["boundary"]["factor"],
                                compact_radius=cfg["compact_radius"])
    rep = run.to_dict()
    rep["reports"] = [_strip_timing(r) for r in rep["reports"]]
    if len(run.states) >= 2:
        rep["completeness"] = analysis.completeness_diagnostic(run.states)
    for st in run.states:
        storage.save_state(st, out / f"stage_{st.meta['stage']}", w.to_spec(), cfg["boundary"])
    _dump(out / "report.json", rep)
    _stage_table(out / "stages.csv", run)
    return EXIT_NONCONVERGENCE if run.truncated else EXIT_OK


def cmd_mollify(cfg: dict, out: Path) -> int:
    w = _weight(cfg)
    run = solver.run_mollification(w, cfg["deltas"], _grid(cfg), _opts(cfg), cfg["compact_radius"],
                                   direct=isinstance(w, (weights.DifferentialWeight, weights.ZeroWeight)))
    rep = run.to_dict()
    rep["reports"] = [_strip_timing(r) for r in rep["reports"]]
    _dump(out / "report.json", rep)
    return EXIT_OK


def cmd_probe(cfg: dict, out: Path) -> int:
    w = _weight(cfg)
    probe = solver.run_uniqueness_probe(w, cfg["stages"], _master(cfg), tuple(cfg["seeds"]), _opts(cfg),
                                        cfg["compact_radius"])
    _dump(out / "report.json", probe.to_dict())
    return EXIT_OK


def verify_exact(n: int = 32) -> list:
    checks = []
    g = make_grid(n, 2 * n, 0.8)
    for r in (2, 3):
        ex = exact_hyperbolic(r, g)
        st, rep = solver.solve_dirichlet(weights.zero(r), g, ex.boundary)
        err = float(np.max(np.abs(np.exp(st.u - ex.u) - 1)))
        checks.append({"name": f"hyperbolic r={r}", "value": err, "passed": err <= 5e-3})
    g = make_grid(n, 2 * n, 0.5)
    for r in (2, 3):
        w = weights.differential([1.0], r)
        ex = exact_flat(np.ones(g.shape), r, g, weights.boundary_E(w, g))
        st, rep = solver.solve_dirichlet(w, g, ex.boundary)
        res = float(np.max(np.abs(residual(st))))
        checks.append({"name": f"flat r={r}", "value": res, "passed": res <= 1e-10 and rep.iterations <= 3})
    for r in range(2, 13):
        d = float(np.max(np.abs(lambda_vector(r) - lambda_from_cartan(r))))
        checks.append({"name": f"cartan r={r}", "value": d, "passed": d <= 1e-12})
    rng = np.random.default_rng(0)
    g = make_grid(8, 16, 0.7)
    st = exact_hyperbolic(3, g)
    st = st.with_u(st.u + 0.1 * rng.standard_normal(st.u.shape))
    st.E[:] = 0.3
    v = rng.standard_normal(st.u.shape)
    Jv = (jacobian(st) @ v.ravel()).reshape(v.shape)
    fd = (residual(st.with_u(st.u + 1e-6 * v)) - residual(st.with_u(st.u - 1e-6 * v))) / 2e-6
    rel = float(np.max(np.abs(Jv - fd)) / np.max(np.abs(Jv)))
    checks.append({"name": "jacobian fd", "value": rel, "passed": rel <= 1e-5})
    return checks


def verify_bounds(n: int = 32) -> list:
    checks = []
    g = make_grid(n, 2 * n, 0.8)
    for r in (2, 3):
        for coeffs in ([0.0], [1.0], [0.0, 1.0]):
            w = weights.differential(coeffs, r)
            M, _ = weights.sup_exp_phi(w, g)
            st, _ = solver.solve_dirichlet(w, g, solver.boundary_lm(g, r))
            b = analysis.check_volume_bounds(st, M)
            ineq = analysis.check_master_inequalities(st, M)
            checks.append({"name": f"bounds r={r} q={coeffs}", "value": float(min(b.ratio_min)), "passed": b.passed})
            checks.append({"name": f"inequalities r={r} q={coeffs}",
                           "value": min(i.min_margin for i in ineq), "passed": all(i.passed for i in ineq)})
    return checks


def cmd_verify(cfg: dict, out: Path) -> int:
    suite = cfg["suite"]
    checks = []
    if suite in ("exact", "all"):
        checks += verify_exact()
    if suite in ("bounds", "all"):
        checks += verify_bounds()
    if suite in ("lemmas", "all"):
        summ = lemma_lab.run_suite(min(cfg["samples"], 10000), cfg["seed"], delta_budget=5000)
        checks.append({"name": "lemma suite", "value": None, "passed": lemma_lab.suite_passed(summ)})
    ok = all(c["passed"] for c in checks)
    _dump(out / "report.json", {"suite": suite, "passed": ok, "checks": checks})
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_lemmas(cfg: dict, out: Path) -> int:
    summ = lemma_lab.run_suite(cfg["samples"], cfg["seed"])
    summ["passed"] = lemma_lab.suite_passed(summ)
    _dump(out / "lemmas.json", summ)
    print(json.dumps(summ, sort_keys=True, default=_jsonable))
    return EXIT_OK if summ["passed"] else EXIT_VERIFY


def cmd_export(cfg: dict, out: Path) -> int:
    if not cfg["input"]:
        raise ConfigError("$.input", "export needs an input state directory")
    try:
        state, manifest = storage.load_state(cfg["input"])
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError("$.input", f"cannot load state: {exc}") from exc
    written = _export_fields(state, out, cfg["beta"], cfg["heatmaps"])
    _dump(out / "export.json", {"input": cfg["input"], "files": written})
    return EXIT_OK


HANDLERS = {
    "solve": cmd_solve,
    "exhaust": cmd_exhaust,
    "mollify": cmd_mollify,
    "probe-uniqueness": cmd_probe,
    "verify": cmd_verify,
    "lemmas": cmd_lemmas,
    "export": cmd_export,
}


def thread_cap() -> int:
    raw = os.environ.get("TODA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError("$env.TODA_THREADS", f"not an integer: {raw!r}") from exc
    if n < 1:
        raise ConfigError("$env.TODA_THREADS", "must be >= 1")
    return n


def execute(cfg: dict) -> int:
    out = Path(cfg["output"])
    resolved = {k: v for k, v in cfg.items() if not k.startswith("_")}
    try:
        cap = thread_cap()
        _dump(out / "manifest.json", {"config": resolved, "threads": cap, "workers": 1})
        return HANDLERS[cfg["command"]](cfg, out)
    except ConfigError as exc:
        _dump(out / "error.json", {"error": "config", "path": exc.path, "message": str(exc)})
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (solver.NonConvergence, solver.LinearSolveFailure, solver.SolverError) as exc:
        _dump(out / "error.json", {"error": type(exc).__name__, "message": str(exc)})
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="toda", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="JSON run config")
        sp.add_argument("--output", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--r", type=int)
        sp.add_argument("--stages", type=int)
        sp.add_argument("--scheme", choices=solver.SCHEMES)
        sp.add_argument("--max-newton", type=int, dest="max_newton")
        sp.add_argument("--heatmaps", action="store_true", default=None)
        if name == "verify":
            sp.add_argument("--suite", choices=SUITES)
        if name == "lemmas":
            sp.add_argument("--samples", type=int)
        if name == "export":
            sp.add_argument("--input")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    text = args.config.read_text(encoding="utf-8") if args.config else "{}"
    overrides = {
        "command": args.command,
        "output": args.output,
        "seed": args.seed,
        "r": args.r,
        "stages": args.stages,
        "scheme": args.scheme,
        "tolerances.max_newton": args.max_newton,
        "heatmaps": args.heatmaps,
        "suite": getattr(args, "suite", None),
        "samples": getattr(args, "samples", None),
        "input": getattr(args, "input", None),
    }
    try:
        cfg = parse_config(text, overrides)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "path": exc.path, "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    return execute(cfg)


if __name__ == "__main__":
    sys.exit(main())
