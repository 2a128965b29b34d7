"""Command-line interface: ``ngo <verb> --config PATH --out DIR [--seed S] [--threads N]``.

Verbs: generate, train, eval, sweep, rollout, precon-bench. Every verb reads
a JSON config and writes JSON/CSV artifacts into ``--out``. Exit codes: 0
success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .assembly import Discretization, assemble_steady, make_quadratures, project_L2
from .core import (
    make_ngo_model,
    ngo_forward,
    precompute_inputs,
    relative_errors,
    train_data_free_ngo,
    train_data_ngo,
    train_model_ngo,
)
from .data import DATASETS, make_dataset
from .discretization import make_bspline_basis, make_tensor_basis
from .errors import ConfigError, DomainError, NumericalError
from .krylov import PRECONDITIONERS, block_jacobi, fd_system_from_sample, make_ngo_preconditioner, \
    ngo_coarse_matrix, solve, write_matrix_market
from .nn import TrainConfig
from .timestepper import (
    CSV_FIELDS,
    FemStep,
    NgoStep,
    PowerIterationState,
    RolloutConfig,
    make_space_time_discretization,
    precompute_space_time_inputs,
    rollout,
    train_space_time_ngo,
    trace_blocks,
)

__all__ = ["main", "confidence_interval", "VERBS"]

log = logging.getLogger("ngo")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def confidence_interval(values) -> dict:
    """Normal-approximation 95% interval: ``mean ± 1.96·std/√n`` (sample std, ddof=1)."""
    v = np.asarray(values, dtype=float)
    n = v.size
    mean = float(v.mean()) if n else float("nan")
    std = float(v.std(ddof=1)) if n > 1 else 0.0
    half = 1.96 * std / np.sqrt(n) if n else float("nan")
    return {"n": n, "mean": mean, "std": std, "ci_low": mean - half, "ci_high": mean + half, "ci_half": half}


# -- config helpers ----------------------------------------------------------


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"config is missing {key!r}")
    return cfg[key]


def _options(opts: dict | None) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in (opts or {}).items()}


def _load_samples(spec: dict, seed: int):
    if "dir" in spec:
        return io.load_dataset(spec["dir"])[0]
    name = _require(spec, "name")
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}")
    n = int(_require(spec, "n"))
    if n < 1:
        raise ConfigError("dataset size must be at least 1")
    return make_dataset(name, n, int(spec.get("seed", seed)), **_options(spec.get("options")))


def _steady_disc(cfg: dict) -> Discretization:
    b = cfg.get("basis", {})
    q = cfg.get("quadrature", {})
    fac = make_bspline_basis(int(b.get("n", 10)), int(b.get("degree", 3)))
    return Discretization(make_tensor_basis([fac, fac]),
                          make_quadratures(int(q.get("cells", 14)), int(q.get("points", 4))))


def _space_time_disc(cfg: dict) -> Discretization:
    return make_space_time_discretization(**cfg.get("discretization", {}))


def _disc_from_header(h: dict) -> Discretization:
    d = h.get("discretization", {})
    return _space_time_disc(d) if h.get("kind") == "space-time" else _steady_disc(d)


def _is_space_time(spec: dict) -> bool:
    if "dir" in spec:
        return io.read_json(Path(spec["dir"]) / "manifest.json").get("space_time", False)
    return spec.get("name") == "D"


# -- verbs -------------------------------------------------------------------


def cmd_generate(cfg: dict, out: Path, seed: int) -> dict:
    name = _require(cfg, "dataset")
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}")
    n = int(_require(cfg, "n"))
    if n < 1:
        raise ConfigError("n must be at least 1")
    io.save_dataset(out, name, n, int(cfg.get("seed", seed)), cfg.get("options"))
    return {"dataset": name, "n": n}


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = dict(cfg.get("training", {}))
    t.setdefault("seed", seed)
    try:
        return TrainConfig(**t)
    except TypeError as exc:
        raise ConfigError(f"bad training settings: {exc}") from exc


def cmd_train(cfg: dict, out: Path, seed: int) -> dict:
    ds = _require(cfg, "dataset")
    space_time = _is_space_time(ds)
    samples = _load_samples(ds, seed)
    n_train = int(cfg.get("n_train", max(1, round(0.875 * len(samples)))))
    if not 1 <= n_train <= len(samples):
        raise ConfigError("n_train must lie between 1 and the dataset size")
    mc = cfg.get("model", {})
    variant = mc.get("variant", "model")
    nitsche = bool(mc.get("nitsche", True))
    tcfg = _train_config(cfg, seed)
    history = {"train_loss": [], "val_loss": []}
    if space_time:
        disc = _space_time_disc(cfg)
        blocks = trace_blocks(disc)
        inputs = precompute_space_time_inputs(samples, disc, blocks, nitsche, time_channel=mc.get("time_channel", False))
    else:
        disc = _steady_disc(cfg)
        inputs = precompute_inputs(samples, disc, nitsche=nitsche, system=variant != "data",
                                   moments=variant == "data", reference=variant != "data-free")
    tr = inputs.subset(np.arange(n_train))
    va = inputs.subset(np.arange(n_train, len(samples))) if n_train < len(samples) else None

    if cfg.get("resume"):
        model, header = io.load_model(cfg["resume"])
        if model.variant != variant:
            raise ConfigError("resume bundle has a different variant")
        history = header.get("history", history)
    else:
        model = make_ngo_model(variant, disc.basis, tr, hidden=tuple(mc.get("hidden", (64, 64))),
                               neumann=bool(mc.get("neumann", variant != "data")) and variant != "data",
                               K=int(mc.get("K", 1)), scale_equivariant=bool(mc.get("scale_equivariant", False)),
                               nitsche_in_inputs=nitsche, theta_mean=float(mc.get("theta_mean", 1.0)), disc=disc,
                               seed=int(mc.get("seed", seed)), time_channel=bool(mc.get("time_channel", False)))

    if space_time:
        S = mc.get("norm_scaling_S")
        res = train_space_time_ngo(model, tr, va, tcfg, disc, blocks, None if S is None else float(S),
                                   PowerIterationState(), float(mc.get("theta_mean", 1.0)))
    else:
        trainer = {"model": train_model_ngo, "data": train_data_ngo, "data-free": train_data_free_ngo}[variant]
        res = trainer(model, tr, va, tcfg)
    offset = len(history["train_loss"])
    history = {"train_loss": history["train_loss"] + res.train_loss,
               "val_loss": history["val_loss"] + res.val_loss,
               "best_epoch": offset + res.best_epoch}
    extra = {"kind": "space-time" if space_time else "steady",
             "discretization": {k: cfg[k] for k in ("basis", "quadrature", "discretization") if k in cfg},
             "history": history, "config": cfg}
    io.save_model(out / "model", model, extra)
    io.write_csv(out / "history.csv",
                 [{"epoch": i, "train_loss": a, "val_loss": b}
                  for i, (a, b) in enumerate(zip(history["train_loss"], history["val_loss"]))])
    return {"epochs": len(history["train_loss"]), "best_epoch": history["best_epoch"],
            "best_val_loss": history["val_loss"][history["best_epoch"]] if history["val_loss"] else None}


def _eval_rows(cfg: dict, seed: int) -> list[dict]:
    models = []
    for m in cfg.get("models", []):
        model, h = io.load_model(_require(m, "bundle"))
        if h.get("kind") == "space-time":
            raise ConfigError("eval handles steady models; use the rollout verb for space-time models")
        models.append((m.get("label", Path(m["bundle"]).name), model, _disc_from_header(h)))
    baselines = cfg.get("baselines", ["fem", "projection"])
    if not models and not baselines:
        raise ConfigError("nothing to evaluate: give models or baselines")
    base_disc = models[0][2] if models else _steady_disc(cfg)
    test_sets = _require(cfg, "test_sets")
    if not test_sets:
        raise ConfigError("test_sets is empty")
    rows = []
    for k, ts in enumerate(test_sets):
        label = ts.get("label", f"set{k}")
        samples = _load_samples(ts, seed)
        for name, model, disc in models:
            data = model.variant == "data"
            inp = precompute_inputs(samples, disc, nitsche=model.nitsche_in_inputs, system=not data, moments=data)
            rows.append({"model": name, "test_set": label,
                         **confidence_interval(relative_errors(ngo_forward(model, inp), inp))})
        if "fem" in baselines:
            inp = precompute_inputs(samples, base_disc, nitsche=True, moments=False, fem=True)
            rows.append({"model": "fem", "test_set": label, **confidence_interval(relative_errors(inp.fem, inp))})
        if "projection" in baselines:
            errs = [project_L2(s.u, base_disc.basis, base_disc.quads.domain)[1] for s in samples]
            rows.append({"model": "projection", "test_set": label, **confidence_interval(errs)})
    return rows


EVAL_FIELDS = ["model", "test_set", "n", "mean", "std", "ci_low", "ci_high", "ci_half"]


def cmd_eval(cfg: dict, out: Path, seed: int) -> dict:
    rows = _eval_rows(cfg, seed)
    io.write_json(out / "eval.json", {"schema_version": io.SCHEMA_VERSION, "rows": rows})
    io.write_csv(out / "eval.csv", rows, EVAL_FIELDS)
    return {"rows": len(rows)}


def _set_path(obj, path, value):
    for key in path[:-1]:
        obj = obj[key]
    obj[path[-1]] = value


def cmd_sweep(cfg: dict, out: Path, seed: int) -> dict:
    base = _require(cfg, "eval")
    axis = _require(cfg, "axis")
    name, path, values = _require(axis, "name"), _require(axis, "path"), _require(axis, "values")
    if not values:
        raise ConfigError("sweep axis has no values")
    records = []
    for v in values:
        c = copy.deepcopy(base)
        try:
            _set_path(c, path, v)
        except (KeyError, IndexError, TypeError) as exc:
            raise ConfigError(f"sweep path {path!r} does not exist in the eval config") from exc
        for r in _eval_rows(c, seed):
            records.append({"axis": name, "value": json.dumps(v), **r})
    io.write_json(out / "sweep.json", {"schema_version": io.SCHEMA_VERSION, "axis": name, "records": records})
    io.write_csv(out / "sweep.csv", records, ["axis", "value", *EVAL_FIELDS])
    return {"records": len(records)}


def cmd_rollout(cfg: dict, out: Path, seed: int) -> dict:
    ds = _require(cfg, "dataset")
    samples = _load_samples(ds, seed)
    stepper_cfg = cfg.get("stepper", "fem")
    if stepper_cfg == "fem":
        disc, stepper = _space_time_disc(cfg), FemStep()
    elif isinstance(stepper_cfg, dict) and "bundle" in stepper_cfg:
        model, h = io.load_model(stepper_cfg["bundle"])
        if h.get("kind") != "space-time":
            raise ConfigError("rollout needs a space-time model bundle")
        disc, stepper = _disc_from_header(h), NgoStep(model)
    else:
        raise ConfigError("stepper must be 'fem' or {'bundle': path}")
    rc = cfg.get("rollout", {})
    try:
        config = RolloutConfig(**rc)
    except TypeError as exc:
        raise ConfigError(f"bad rollout settings: {exc}") from exc
    blocks = trace_blocks(disc)
    summary = []
    for k in cfg.get("samples", range(len(samples))):
        res = rollout(stepper, samples[k], disc, config, blocks, PowerIterationState())
        res.to_csv(out / f"rollout_{k}.csv")
        err = res.column("rel_error")
        summary.append({"sample": k, "steps": len(res.records), "final_rel_error": float(err[-1]),
                        "max_rel_error": float(np.nanmax(err)), "final_energy": float(res.column("energy")[-1])})
    io.write_json(out / "rollout.json", {"schema_version": io.SCHEMA_VERSION, "fields": CSV_FIELDS,
                                         "samples": summary})
    return {"samples": len(summary)}


def _oracle_matrix(theta, disc: Discretization) -> np.ndarray:
    F = assemble_steady(theta, disc).system(True)[0]
    return np.linalg.inv(F.toarray() if hasattr(F, "toarray") else F)


def cmd_precon_bench(cfg: dict, out: Path, seed: int) -> dict:
    solvers = cfg.get("solvers", ["GMRES(inf)", "GMRES(50)", "F-GMRES(inf)", "F-GMRES(50)", "Bi-CGSTAB"])
    precs = cfg.get("preconditioners", list(PRECONDITIONERS))
    if not solvers:
        raise ConfigError("solver list is empty")
    if not precs or any(p not in PRECONDITIONERS for p in precs):
        raise ConfigError(f"preconditioners must be a non-empty subset of {PRECONDITIONERS}")
    h = 1.0 / float(cfg.get("grid", 49))
    samples = _load_samples(cfg.get("dataset", {"name": "C", "n": 50}), seed)
    ngo = cfg.get("ngo", "oracle")
    if ngo == "oracle":
        disc, model = _steady_disc(cfg), None
    elif isinstance(ngo, dict) and "bundle" in ngo:
        model, hdr = io.load_model(ngo["bundle"])
        disc = _disc_from_header(hdr)
    else:
        raise ConfigError("ngo must be 'oracle' or {'bundle': path}")
    tol, max_iter = float(cfg.get("tol", 1e-8)), int(cfg.get("max_iter", 5000))
    n_hist = int(cfg.get("histories", 1))
    counts = {(s, p): [] for s in solvers for p in precs}
    conv = {(s, p): [] for s in solvers for p in precs}
    histories = []
    for k, smp in enumerate(samples):
        system = fd_system_from_sample(smp, h)
        if k == 0 and cfg.get("export_matrix", False):
            write_matrix_market(system, out / "C.mtx")
        bj = block_jacobi(system.C, system.ny)
        M = {"none": None, "blk-jac": bj}
        if "blk-jac+NGO" in precs:
            theta = smp.fields.theta
            A = _oracle_matrix(theta, disc) if model is None else ngo_coarse_matrix(model, theta, disc)
            M["blk-jac+NGO"] = make_ngo_preconditioner(A, disc.basis, system, bj)
        for s in solvers:
            for p in precs:
                r = solve(s, system.C, system.b, M[p], tol, max_iter)
                counts[s, p].append(r.iterations)
                conv[s, p].append(bool(r.converged))
                if k < n_hist:
                    histories.append({"sample": k, "solver": s, "preconditioner": p, "residuals": r.residuals})
    rows = [{"solver": s, "preconditioner": p, "mean_iterations": float(np.mean(counts[s, p])),
             "std_iterations": float(np.std(counts[s, p])), "all_converged": all(conv[s, p]),
             "iterations": counts[s, p]} for s in solvers for p in precs]
    io.write_json(out / "bench.json", {"schema_version": io.SCHEMA_VERSION, "h": h, "n_systems": len(samples),
                                       "tol": tol, "rows": rows, "residual_histories": histories})
    io.write_csv(out / "bench.csv", rows, ["solver", "preconditioner", "mean_iterations", "std_iterations",
                                           "all_converged"])
    return {"rows": len(rows)}


VERBS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "rollout": cmd_rollout,
    "precon-bench": cmd_precon_bench,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ngo", description="Neural Green's operator experiments")
    p.add_argument("verb", choices=sorted(VERBS))
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="base seed (overrides the config's 'seed')")
    p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be positive")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(args.threads):
                info = VERBS[args.verb](cfg, out, seed)
        else:
            info = VERBS[args.verb](cfg, out, seed)
        io.write_json(out / "run.json", {"schema_version": io.SCHEMA_VERSION, "verb": args.verb, "seed": seed,
                                         "config": cfg, "result": info,
                                         "seconds": round(time.perf_counter() - t0, 3)})
    except (ConfigError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK
