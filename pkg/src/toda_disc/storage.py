"""State directories: ``manifest.json`` plus one TODA1 file per field."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import ScalarField, make_grid, read_field, write_field
from .toda_core import TodaState


def save_state(state: TodaState, directory, weight_spec: dict | None = None,
               boundary_spec: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = state.grid
    files = []
    for j in range(state.r - 1):
        name = f"u_{j + 1}.toda"
        write_field(d / name, ScalarField(g, state.u[j], f"u_{j + 1}"))
        files.append(name)
    write_field(d / "E.toda", ScalarField(g, state.E, "E", density=True))
    manifest = {
        "r": state.r,
        "grid": {"n_r": g.n_r, "n_theta": g.n_theta, "outer_radius": g.outer_radius},
        "weight": weight_spec,
        "boundary": boundary_spec,
        "fields": files + ["E.toda"],
        "meta": {k: v for k, v in state.meta.items() if isinstance(v, (int, float, str, bool))},
    }
    if state.boundary is not None:
        manifest["boundary_values"] = state.boundary.tolist()
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_state(directory) -> tuple[TodaState, dict]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    r = int(manifest["r"])
    grid = make_grid(**manifest["grid"])
    u = np.stack([read_field(d / f"u_{j + 1}.toda").values for j in range(r - 1)])
    E = read_field(d / "E.toda").values
    for f in (*[d / f"u_{j + 1}.toda" for j in range(r - 1)], d / "E.toda"):
        if read_field(f).grid != grid:
            raise ValueError(f"{f} does not match the manifest grid")
    bnd = manifest.get("boundary_values")
    state = TodaState(r, grid, u, E, None if bnd is None else np.array(bnd), dict(manifest.get("meta", {})))
    return state, manifest
