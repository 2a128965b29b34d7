"""On-disk formats: dataset directories, model bundles, CSV and JSON records.

A dataset directory holds ``manifest.json`` (generator name, size, seed,
options, per-sample draws) and ``arrays.npz`` (fields sampled on a uniform
grid). Samples are rebuilt from the manifest, which is exact because
generation is seeded per sample; the stored arrays are checked against the
rebuilt fields on load.

A model bundle holds ``header.json`` (variant, basis, discretization,
Neumann settings, flags, training history), ``weights.npz`` and, for the
Neumann ansatz, ``F0_inverse.npy`` plus ``F0.npy`` (kept so reloads are bitwise).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .assembly import sample_field
from .core import NeumannConfig, NgoModel
from .data import make_dataset
from .discretization import basis_from_dict
from .errors import ConfigError
from .nn import Mlp

__all__ = [
    "SCHEMA_VERSION",
    "save_dataset",
    "load_dataset",
    "save_model",
    "load_model",
    "write_json",
    "read_json",
    "write_csv",
    "field_grid",
]

SCHEMA_VERSION = 1
GRID = 33


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_csv(path, rows: Sequence[dict], fields: Iterable[str] | None = None) -> None:
    rows = list(rows)
    fields = list(fields) if fields is not None else (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: _jsonable(r.get(k, "")) for k in fields})


def field_grid(space_time: bool, n: int = GRID, t_end: float = 1.0) -> np.ndarray:
    """Uniform sampling grid: ``(x, y)`` or ``(t, x, y)`` with t ∈ {0, t_end/2, t_end}."""
    s = np.linspace(0.0, 1.0, n)
    axes = ([np.array([0.0, 0.5 * t_end, t_end])] if space_time else []) + [s, s]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def _sample_arrays(samples, grid) -> dict:
    out = {k: [] for k in ("theta", "f", "u")}
    for s in samples:
        out["theta"].append(sample_field(s.fields.theta, grid))
        out["f"].append(sample_field(s.fields.f, grid))
        out["u"].append(s.u(grid) if s.u is not None else np.full(len(grid), np.nan))
    return {k: np.array(v) for k, v in out.items()}


def save_dataset(directory, name: str, n: int, seed: int, options: dict | None = None,
                 samples=None) -> list:
    """Generate (unless ``samples`` is given) and write a dataset directory."""
    options = dict(options or {})
    if samples is None:
        samples = make_dataset(name, n, seed, **options)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    space_time = name == "D"
    grid = field_grid(space_time, t_end=float(options.get("t_end", 1.0)))
    np.savez(d / "arrays.npz", grid=grid, **_sample_arrays(samples, grid))
    write_json(d / "manifest.json", {
        "schema_version": SCHEMA_VERSION,
        "dataset": name,
        "n": n,
        "seed": seed,
        "options": options,
        "space_time": space_time,
        "arrays": {"file": "arrays.npz", "grid_shape": [3, GRID, GRID] if space_time else [GRID, GRID],
                   "fields": ["theta", "f", "u"]},
        "samples": [{"index": i, "seed": s.seed, "provenance": s.provenance, "params": s.params}
                    for i, s in enumerate(samples)],
    })
    return samples


def load_dataset(directory, verify: bool = True) -> tuple[list, dict]:
    """Rebuild samples from a dataset directory; returns ``(samples, manifest)``."""
    d = Path(directory)
    try:
        man = read_json(d / "manifest.json")
    except FileNotFoundError as exc:
        raise ConfigError(f"no manifest.json in {d}") from exc
    opts = {k: tuple(v) if isinstance(v, list) else v for k, v in man.get("options", {}).items()}
    samples = make_dataset(man["dataset"], int(man["n"]), int(man["seed"]), **opts)
    if verify:
        arr = np.load(d / "arrays.npz")
        theta = np.array([sample_field(s.fields.theta, arr["grid"]) for s in samples])
        if theta.shape != arr["theta"].shape or np.abs(theta - arr["theta"]).max() > 1e-10:
            raise ConfigError(f"dataset arrays in {d} do not match the manifest")
    return samples, man


def save_model(directory, model: NgoModel, extra: dict | None = None) -> None:
    """Write a model bundle; ``extra`` goes into the header (discretization, history, ...)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    neu = model.neumann
    header = {
        "schema_version": SCHEMA_VERSION,
        "variant": model.variant,
        "basis": model.basis.to_dict(),
        "neumann": None if neu is None else {"enabled": neu.enabled, "K": neu.K, "theta_mean": neu.theta_mean},
        "scale_equivariant": model.scale_equivariant,
        "nitsche_in_inputs": model.nitsche_in_inputs,
        "scale_ref": model.scale_ref,
        "input_scale": model.input_scale,
        "output_scale": model.output_scale,
        "time_channel": model.time_channel,
        "layers": [list(w.shape) for w in model.net.weights],
    }
    header.update(extra or {})
    np.savez(d / "weights.npz", *model.net.weights)
    if neu is not None and neu.F0_inverse is not None:
        np.save(d / "F0_inverse.npy", neu.F0_inverse)
        np.save(d / "F0.npy", neu.F0)
    write_json(d / "header.json", header)


def load_model(directory) -> tuple[NgoModel, dict]:
    """Read a model bundle; returns ``(model, header)``."""
    d = Path(directory)
    try:
        h = read_json(d / "header.json")
    except FileNotFoundError as exc:
        raise ConfigError(f"no header.json in {d}") from exc
    if h.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported bundle schema {h.get('schema_version')!r}")
    w = np.load(d / "weights.npz")
    net = Mlp([w[f"arr_{i}"] for i in range(len(h["layers"]))])
    neu = None
    if h["neumann"] is not None:
        F0i = np.load(d / "F0_inverse.npy")
        F0 = np.load(d / "F0.npy") if (d / "F0.npy").exists() else None
        neu = NeumannConfig(F0i, h["neumann"]["theta_mean"], h["neumann"]["K"], h["neumann"]["enabled"], F0)
    model = NgoModel(h["variant"], basis_from_dict(h["basis"]), net, neu, h["scale_equivariant"],
                     h["nitsche_in_inputs"], h["scale_ref"], h["input_scale"], h["output_scale"],
                     h["time_channel"])
    return model, h
