"""Command-line entry point: ``flowbank {generate,forecast,gridsearch,ablate,diagnose}``.

Every subcommand reads one flat JSON config (``--config``), overlays any
``--key value`` flags on top (values are parsed as JSON when possible, so
``--top-r null`` or ``--grid-sigma "[0, 0.1]"`` work), echoes the resolved
config to ``<out>/config.<command>.json`` and embeds it, with the bank hash, in every
output file.  The worker count comes from ``FLOWBANK_WORKERS`` and never
enters the config, so outputs do not depend on it.

Exit codes: 0 all units succeeded, 1 some unit failed (a diverged sample,
a failing diagnostic), 2 invalid input or configuration.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .bank import (M_CONVENTION, TransitionBank, extract_transitions, load_bank,
                   read_trajectories, save_bank, write_trajectory_csv)
from .errors import ConfigError, FlowbankError, IoError, NoData
from .metrics import DEFAULT_SETTINGS, MetricReport, crps_ensemble, smape, vpt_from_smape
from .sampler import SolverConfig, forecast_batch
from .systems import SamplingPlan, SystemSpec, estimate_lyapunov, generate_benchmark
from .velocity import GaussianBridge, RectifiedFlow

logger = logging.getLogger("flowbank")

WORKERS_ENV = "FLOWBANK_WORKERS"

DEFAULTS = {
    "seed": 0,
    "out": "flowbank_run",
    # data generation
    "system": "lorenz63",
    "params": {},
    "lyapunov_exponent": None,
    "points_per_lyapunov_time": 100,
    "n_trajectories": 20,
    "length": 812,
    "burn_in": 50.0,
    "internal_substeps": 10,
    # bank and forecast protocol
    "data": None,
    "bank": None,
    "bank_source": "window",
    "context": 312,
    "horizon": 500,
    "samples": 1,
    # path family and solver
    "family": "bridge",
    "sigma_min": None,
    "sigma": None,
    "sigma_min_rf": 0.0,
    "bandwidths_from": None,
    "scheme": "euler",
    "steps": 100,
    "sde_diffusion": 0.0,
    "top_r": None,
    "init_noise": True,
    # metrics
    "epsilon": 20.0,
    # grid search, as multiples of the bank's mean coordinate scale when grid_relative
    "grid_sigma_min": [0.001, 0.003, 0.01, 0.03],
    "grid_sigma": [0.0, 0.01, 0.1],
    "grid_relative": True,
    "holdout": 0.1,
    # ablation
    "ablate_steps": [30, 50, 100],
    "ablate_schemes": ["euler", "rk4", "etd1"],
    "ablate_top_r": [None, 256],
    # diagnostics
    "only": None,
    "diag_probes": 1000,
    "diag_R": [1, 16, 256],
}

BANK_SOURCES = ("window", "own")
DIAGNOSTICS = ("truncation", "lipschitz", "duhamel", "equivariance", "cost")
# short flags accepted on top of the --config-key spelling
FLAG_ALIASES = {"n": "n_trajectories", "S": "samples", "H": "horizon", "R": "top_r",
                "L": "steps"}


# --------------------------------------------------------------------------- config

def resolve_config(overrides=None, config_path=None) -> dict:
    """Defaults, then the JSON file, then explicit overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise IoError(f"cannot read config {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        # output files embed their config under "config"; accept them for re-runs
        nested = loaded.get("config")
        cfg.update(nested if isinstance(nested, dict) else loaded)
    for k, v in (overrides or {}).items():
        cfg[FLAG_ALIASES.get(k, k)] = v
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return cfg


def config_digest(cfg) -> str:
    return hashlib.sha256(_dumps(cfg).encode()).hexdigest()


def _dumps(obj, indent=None) -> str:
    return json.dumps(obj, indent=indent, sort_keys=True, allow_nan=True)


def _write_json(path: Path, obj, indent=1):
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(_dumps(obj, indent=indent) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _write_long_csv(path: Path, rows, header_meta: dict):
    """Long-format table ``step, quantity, value, sample`` with ``#`` metadata lines."""
    with open(path, "w", newline="") as fh:
        for k, v in header_meta.items():
            fh.write(f"# {k}: {_dumps(v)}\n")
        w = csv.writer(fh)
        w.writerow(["step", "quantity", "value", "sample"])
        for r in rows:
            w.writerow([r[0], r[1], repr(float(r[2])), r[3]])


def _echo_config(cfg, command) -> Path:
    out = Path(cfg["out"])
    _write_json(out / f"config.{command}.json", cfg)
    return out


def workers_from_env() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV}={raw!r} is not an integer") from exc
    return max(1, n)


# --------------------------------------------------------------------------- builders

def _system(cfg) -> SystemSpec:
    return SystemSpec(cfg["system"], dict(cfg["params"] or {}))


def _lyapunov(cfg, spec) -> tuple[float, str]:
    if cfg["lyapunov_exponent"] is not None:
        return float(cfg["lyapunov_exponent"]), "config"
    ref = spec.reference_lyapunov
    if ref is not None:
        return ref, "reference"
    box = np.asarray(spec.box, dtype=float)
    # nudge off the box centre, which sits on an invariant axis for some systems
    x0 = box.mean(axis=1) + 0.1 * (box[:, 1] - box[:, 0])
    est = estimate_lyapunov(spec, x0, 500.0, 1.0, transient=50.0)
    if not est.exponent > 0:
        raise ConfigError(f"{spec.name}: estimated largest exponent {est.exponent:.3g} "
                          "is not positive; set lyapunov_exponent explicitly")
    return est.exponent, "estimated"


def _data_dir(cfg) -> Path:
    return Path(cfg["data"]) if cfg["data"] else Path(cfg["out"]) / "trajectories"


def _load_trajectories(cfg):
    directory = _data_dir(cfg)
    if not directory.is_dir():
        raise IoError(f"trajectory directory {directory} does not exist")
    trajs = read_trajectories(directory)
    if not trajs:
        raise IoError(f"no trajectory CSV files in {directory}")
    return trajs


def _window_bank(trajs, context) -> TransitionBank:
    if context < 2:
        raise ConfigError("context must be >= 2 points")
    short = [t.id for t in trajs if len(t) < context]
    if short:
        raise ConfigError(f"trajectories shorter than context={context}: {short[:5]}")
    return extract_transitions([t.head(context) for t in trajs])


def _family(cfg, bank: TransitionBank):
    if cfg["family"] in ("rf", "rectified", "rectified_flow"):
        return RectifiedFlow(float(cfg["sigma_min_rf"]))
    if cfg["family"] not in ("bridge", "gaussian_bridge"):
        raise ConfigError(f"unknown family {cfg['family']!r}")
    smin, sig = cfg["sigma_min"], cfg["sigma"]
    if cfg["bandwidths_from"]:
        best = _read_gridsearch(cfg["bandwidths_from"])
        smin = best["sigma_min"] if smin is None else smin
        sig = best["sigma"] if sig is None else sig
    dmin, dsig = bank.default_bandwidths()
    return GaussianBridge(float(dmin if smin is None else smin), float(dsig if sig is None else sig))


def _read_gridsearch(path):
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read grid search result {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if "best" not in doc:
        raise ConfigError(f"{path} has no 'best' entry")
    return doc["best"]


def _family_dict(family) -> dict:
    if isinstance(family, GaussianBridge):
        return {"family": "gaussian_bridge", "sigma_min": family.sigma_min, "sigma": family.sigma}
    return {"family": "rectified_flow", "sigma_min_rf": family.sigma_min_rf}


def _solver(cfg, **over) -> SolverConfig:
    keys = ("scheme", "steps", "sde_diffusion", "top_r", "seed", "init_noise")
    vals = {k: cfg[k] for k in keys}
    vals.update(over)
    return SolverConfig(vals["scheme"], int(vals["steps"]), float(vals["sde_diffusion"]),
                        None if vals["top_r"] is None else int(vals["top_r"]),
                        int(vals["seed"]), bool(vals["init_noise"]))


def _parallel(fn, items, workers):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------- generate

def cmd_generate(cfg) -> dict:
    """Simulate the benchmark and write one CSV per trajectory plus ``manifest.json``."""
    out = _echo_config(cfg, "generate")
    spec = _system(cfg)
    lam, lam_source = _lyapunov(cfg, spec)
    plan = SamplingPlan(lam, int(cfg["points_per_lyapunov_time"]), int(cfg["n_trajectories"]),
                        int(cfg["length"]), float(cfg["burn_in"]), None,
                        int(cfg["internal_substeps"]))
    trajs = generate_benchmark(spec, plan, int(cfg["seed"]))
    directory = _data_dir(cfg)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for tr in trajs:
        path = directory / f"{tr.id}.csv"
        write_trajectory_csv(tr, path)
        files.append({"id": tr.id, "file": path.name, "rows": len(tr),
                      "sha256": hashlib.sha256(path.read_bytes()).hexdigest()})
    manifest = {"config": cfg, "bank_hash": None, "system": spec.name, "d": spec.d,
                "dt": plan.dt, "dt_internal": plan.dt_internal, "lyapunov_exponent": lam,
                "lyapunov_source": lam_source, "directory": str(directory), "files": files}
    _write_json(out / "manifest.json", manifest)
    logger.info("wrote %d trajectories to %s", len(files), directory)
    return {"manifest": manifest, "trajectories": trajs, "failed": 0}


# --------------------------------------------------------------------------- forecast

def run_forecast(cfg, trajs=None, workers=1) -> dict:
    """Forecast every trajectory from its first ``context`` points; no file output.

    Returns a dict with the ensemble paths, failures, metrics and bank hash.
    """
    H, S, ctx = int(cfg["horizon"]), int(cfg["samples"]), int(cfg["context"])
    if H < 1:
        raise ConfigError(f"horizon must be >= 1, got {H}")
    if S < 1:
        raise ConfigError(f"samples must be >= 1, got {S}")
    if cfg["bank_source"] not in BANK_SOURCES:
        raise ConfigError(f"bank_source must be one of {BANK_SOURCES}")
    trajs = trajs if trajs is not None else _load_trajectories(cfg)
    need = ctx + H
    short = [t.id for t in trajs if len(t) < need]
    if short:
        raise ConfigError(f"context + horizon = {need} exceeds trajectory length for {short[:5]}")
    solver = _solver(cfg)
    if cfg["bank"]:
        shared = load_bank(cfg["bank"])
    else:
        shared = _window_bank(trajs, ctx) if cfg["bank_source"] == "window" else None
    units = []  # (bank, family, rows) with rows = [(traj_idx, sample)]
    if shared is not None:
        family = _family(cfg, shared)
        rows = [(i, s) for i in range(len(trajs)) for s in range(S)]
        n_chunks = max(1, min(workers, len(rows)))
        for c in range(n_chunks):
            units.append((shared, family, rows[c::n_chunks]))
        bank_hash = shared.content_hash()
    else:
        hashes = []
        for i, tr in enumerate(trajs):
            b = _window_bank([tr], ctx)
            units.append((b, _family(cfg, b), [(i, s) for s in range(S)]))
            hashes.append(b.content_hash())
        bank_hash = hashlib.sha256("".join(hashes).encode()).hexdigest()
    solver.check_family(units[0][1])

    def run(unit):
        bank, family, rows = unit
        origins = np.array([trajs[i].states[ctx - 1] for i, _ in rows])
        paths, fails = forecast_batch(origins, H, bank, family, solver, rows)
        return rows, paths, fails

    d = trajs[0].d
    paths = np.full((len(trajs), S, H, d), np.nan)
    failures = {}
    t0 = time.perf_counter()
    for rows, p, fails in _parallel(run, units, workers):
        for k, (i, s) in enumerate(rows):
            paths[i, s] = p[k]
            if k in fails:
                failures[(i, s)] = str(fails[k])
    elapsed = time.perf_counter() - t0
    metrics = evaluate_forecast(trajs, paths, failures, cfg)
    return {"paths": paths, "failures": failures, "metrics": metrics, "bank_hash": bank_hash,
            "family": _family_dict(units[0][1]), "solver": solver.as_dict(),
            "trajectories": trajs, "seconds": elapsed,
            "M": None if shared is None else shared.M}


def evaluate_forecast(trajs, paths, failures, cfg) -> dict:
    """Per-trajectory MetricReports and the aggregates over trajectories."""
    ctx, eps = int(cfg["context"]), float(cfg["epsilon"])
    ppl = int(cfg["points_per_lyapunov_time"])
    n, S, H, _ = paths.shape
    per_traj, curves, crps_curves = [], [], []
    for i, tr in enumerate(trajs):
        truth = tr.states[ctx:ctx + H]
        ok = [s for s in range(S) if (i, s) not in failures]
        if not ok:
            per_traj.append({"id": tr.id, "failed": True})
            continue
        samples = paths[i, ok]
        point = samples[0] if S == 1 else samples.mean(axis=0)
        curve = smape(truth, point)
        crps_curve = crps_ensemble(samples, truth) if S > 1 else None
        rep = MetricReport(curve.tolist(), vpt_from_smape(curve, eps, ppl), eps,
                           None if crps_curve is None else crps_curve.tolist(),
                           settings=dict(DEFAULT_SETTINGS, points_per_lyapunov_time=ppl,
                                         point_forecast="sample" if S == 1 else "ensemble mean"))
        per_traj.append({"id": tr.id, "failed": False, "n_samples": len(ok), **rep.as_dict()})
        curves.append(curve)
        if crps_curve is not None:
            crps_curves.append(crps_curve)
    agg = {"n_trajectories": n, "n_evaluated": len(curves),
           "failed_samples": len(failures)}
    if curves:
        C = np.array(curves)
        agg.update(mean_vpt=float(np.mean([r["vpt"] for r in per_traj if not r["failed"]])),
                   mean_smape=float(C.mean()),
                   mean_smape_first_lyapunov_time=float(C[:, :min(ppl, H)].mean()),
                   smape_curve=C.mean(axis=0).tolist())
    if crps_curves:
        Q = np.array(crps_curves)
        agg.update(mean_crps=float(Q.mean()), crps_curve=Q.mean(axis=0).tolist())
    return {"aggregate": agg, "per_trajectory": per_traj}


def cmd_forecast(cfg, workers=None) -> dict:
    """Run :func:`run_forecast` and write ``ensemble.json``, ``metrics.json``, ``curves.csv``."""
    workers = workers_from_env() if workers is None else workers
    out = _echo_config(cfg, "forecast")
    res = run_forecast(cfg, workers=workers)
    trajs, paths, failures = res["trajectories"], res["paths"], res["failures"]
    meta = {"config": cfg, "bank_hash": res["bank_hash"], "seed": int(cfg["seed"]),
            "family": res["family"], "solver": res["solver"], "m_convention": M_CONVENTION,
            "bank_source": "file" if cfg["bank"] else cfg["bank_source"], "M": res["M"]}
    if not cfg["bank"] and cfg["bank_source"] == "window":
        save_bank(_window_bank(trajs, int(cfg["context"])), out / "bank.json")
    entries = []
    S = paths.shape[1]
    for i, tr in enumerate(trajs):
        ok = [s for s in range(S) if (i, s) not in failures]
        entries.append({"id": tr.id, "dt": tr.dt, "origin": tr.states[int(cfg["context"]) - 1].tolist(),
                        "sample_ids": ok, "samples": paths[i, ok].tolist(),
                        "failures": {str(s): failures[(i, s)] for s in range(S) if (i, s) in failures}})
    _write_json(out / "ensemble.json", {**meta, "trajectories": entries}, indent=None)
    _write_json(out / "metrics.json", {**meta, **res["metrics"], "seconds": res["seconds"]})
    rows = []
    for r in res["metrics"]["per_trajectory"]:
        if r["failed"]:
            continue
        for k, v in enumerate(r["smape_per_step"]):
            rows.append((k + 1, f"smape:{r['id']}", v, "point"))
        for k, v in enumerate(r["crps_per_step"] or []):
            rows.append((k + 1, f"crps:{r['id']}", v, "ensemble"))
    agg = res["metrics"]["aggregate"]
    for k, v in enumerate(agg.get("smape_curve", [])):
        rows.append((k + 1, "smape:mean", v, "point"))
    for k, v in enumerate(agg.get("crps_curve", [])):
        rows.append((k + 1, "crps:mean", v, "ensemble"))
    _write_long_csv(out / "curves.csv", rows, {"config": cfg, "bank_hash": res["bank_hash"]})
    res["failed"] = len(failures)
    return res


# --------------------------------------------------------------------------- grid search

def grid_points(cfg, bank: TransitionBank) -> list[tuple[float, float]]:
    smins, sigs = list(cfg["grid_sigma_min"] or []), list(cfg["grid_sigma"] or [])
    if not smins or not sigs:
        raise ConfigError("grid search needs at least one sigma_min and one sigma value")
    scale = bank.mean_scale() if cfg["grid_relative"] else 1.0
    pts = [(float(a) * scale, float(b) * scale) for a, b in itertools.product(smins, sigs)]
    if any(a <= 0 or b < 0 for a, b in pts):
        raise ConfigError("grid needs sigma_min > 0 and sigma >= 0")
    return pts


def holdout_split(M: int, fraction: float, seed: int):
    """Deterministic (train, held-out) index split; at least one of each."""
    if M < 2:
        raise NoData(f"grid search needs a bank with >= 2 transitions, got {M}")
    if not 0 < fraction < 1:
        raise ConfigError("holdout must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(M)
    n_hold = min(M - 1, max(1, int(round(fraction * M))))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def grid_search(bank: TransitionBank, points, cfg, workers=1) -> dict:
    """Mean held-out one-step error ``|x_hat_2 - x_2|`` for every grid point."""
    train_idx, hold_idx = holdout_split(bank.M, float(cfg["holdout"]), int(cfg["seed"]))
    train = bank.subset(train_idx)
    x1, x2 = bank.x1[hold_idx], bank.x2[hold_idx]
    solver = _solver(cfg)
    keys = [(int(j),) for j in hold_idx]

    def run(pt):
        family = GaussianBridge(*pt)
        solver.check_family(family)
        paths, fails = forecast_batch(x1, 1, train, family, solver, keys)
        err = np.linalg.norm(paths[:, 0] - x2, axis=1)
        good = np.isfinite(err)
        mean = float(err[good].mean()) if good.all() else float("inf")
        return {"sigma_min": pt[0], "sigma": pt[1], "error": mean, "failures": len(fails)}

    table = _parallel(run, list(points), workers)
    best = min(table, key=lambda r: (r["error"], r["sigma_min"], r["sigma"]))
    return {"table": table, "best": best, "n_train": int(train.M), "n_holdout": int(hold_idx.size)}


def cmd_gridsearch(cfg, workers=None) -> dict:
    workers = workers_from_env() if workers is None else workers
    out = _echo_config(cfg, "gridsearch")
    if cfg["bank"]:
        bank = load_bank(cfg["bank"])
    else:
        bank = _window_bank(_load_trajectories(cfg), int(cfg["context"]))
    res = grid_search(bank, grid_points(cfg, bank), cfg, workers)
    doc = {"config": cfg, "bank_hash": bank.content_hash(), "mean_scale": bank.mean_scale(),
           "metric": "mean Euclidean one-step error on held-out transitions", **res}
    _write_json(out / "gridsearch.json", doc)
    with open(out / "gridsearch.csv", "w", newline="") as fh:
        fh.write(f"# config: {_dumps(cfg)}\n# bank_hash: {doc['bank_hash']}\n")
        w = csv.writer(fh)
        w.writerow(["sigma_min", "sigma", "error", "failures"])
        for r in res["table"]:
            w.writerow([repr(r["sigma_min"]), repr(r["sigma"]), repr(r["error"]), r["failures"]])
    doc["failed"] = int(not np.isfinite(res["best"]["error"]))
    return doc


# --------------------------------------------------------------------------- ablation

def ablation_cells(cfg):
    steps = list(cfg["ablate_steps"] or [])
    schemes = list(cfg["ablate_schemes"] or [])
    tops = list(cfg["ablate_top_r"] or [None])
    if not steps or not schemes:
        raise ConfigError("ablation needs at least one steps value and one scheme")
    return list(itertools.product(steps, schemes, tops))


def cmd_ablate(cfg, workers=None, trajs=None) -> dict:
    """One forecast per (steps, scheme, top_r) cell with a shared seed."""
    workers = workers_from_env() if workers is None else workers
    out = _echo_config(cfg, "ablate")
    trajs = trajs if trajs is not None else _load_trajectories(cfg)
    table, failed, bank_hash = [], 0, None
    ppl = int(cfg["points_per_lyapunov_time"])
    for L, scheme, R in ablation_cells(cfg):
        cell = dict(cfg, steps=int(L), scheme=scheme, top_r=R)
        row = {"steps": int(L), "scheme": scheme, "top_r": R}
        try:
            res = run_forecast(cell, trajs=trajs, workers=workers)
        except FlowbankError as exc:
            row.update(error=str(exc))
            failed += 1
            table.append(row)
            continue
        bank_hash = res["bank_hash"]
        agg = res["metrics"]["aggregate"]
        row.update(mean_smape=agg.get("mean_smape"), mean_vpt=agg.get("mean_vpt"),
                   mean_smape_first_lyapunov_time=agg.get("mean_smape_first_lyapunov_time"),
                   smape_curve=agg.get("smape_curve"), failed_samples=len(res["failures"]),
                   seconds=res["seconds"])
        failed += bool(res["failures"])
        table.append(row)
        logger.info("ablate L=%s %s R=%s: mean sMAPE %.3f", L, scheme, R,
                    row["mean_smape"] if row["mean_smape"] is not None else float("nan"))
    doc = {"config": cfg, "bank_hash": bank_hash, "points_per_lyapunov_time": ppl,
           "table": table}
    _write_json(out / "ablation.json", doc)
    rows = [(k + 1, f"smape:L={r['steps']}:{r['scheme']}:R={r['top_r']}", v, "point")
            for r in table for k, v in enumerate(r.get("smape_curve") or [])]
    _write_long_csv(out / "ablation_curves.csv", rows, {"config": cfg, "bank_hash": bank_hash})
    doc["failed"] = failed
    return doc


# --------------------------------------------------------------------------- diagnostics

def _diagnostic_bank(cfg) -> TransitionBank:
    if cfg["bank"]:
        return load_bank(cfg["bank"])
    directory = _data_dir(cfg)
    if directory.is_dir() and any(directory.glob("*.csv")):
        return _window_bank(read_trajectories(directory), int(cfg["context"]))
    # fully defaulted run: simulate the benchmark in memory
    spec = _system(cfg)
    lam, _ = _lyapunov(cfg, spec)
    plan = SamplingPlan(lam, int(cfg["points_per_lyapunov_time"]), int(cfg["n_trajectories"]),
                        int(cfg["length"]), float(cfg["burn_in"]), None,
                        int(cfg["internal_substeps"]))
    trajs = generate_benchmark(spec, plan, int(cfg["seed"]))
    return _window_bank(trajs, min(int(cfg["context"]), plan.length))


def run_diagnostics(bank, schedule, cfg) -> list:
    only = cfg["only"]
    names = DIAGNOSTICS if only in (None, "", "all") else (
        [only] if isinstance(only, str) else list(only))
    bad = [n for n in names if n not in DIAGNOSTICS]
    if bad:
        raise ConfigError(f"unknown diagnostics {bad}; choose from {DIAGNOSTICS}")
    seed = int(cfg["seed"])
    n = int(cfg["diag_probes"])
    reports = []
    for name in names:
        if name == "truncation":
            parts = [diag.check_truncation_bound(bank, schedule, min(int(R), bank.M), n, seed)
                     for R in cfg["diag_R"]]
            details = [dict(d, R=p.summary["R"]) for p in parts for d in p.details]
            rep = diag._report("truncation", [d["violation"] for d in details], details,
                               tolerance=parts[0].tolerance,
                               summary={"R": [p.summary["R"] for p in parts], "M": bank.M})
        elif name == "lipschitz":
            _, zs = diag.sample_probes(bank, 20, np.random.default_rng(seed))
            rep = diag.check_lipschitz_bound(bank, schedule, np.linspace(0, 1, 11), zs)
        elif name == "duhamel":
            rep = diag.check_duhamel(bank, schedule, rng=seed)
        elif name == "equivariance":
            rep = diag.check_equivariance(bank, schedule, min(n, 500), rng=seed)
        else:
            rep = diag.measure_cost(seed=seed)
        reports.append(rep)
    return reports


def cmd_diagnose(cfg) -> dict:
    out = _echo_config(cfg, "diagnose")
    bank = _diagnostic_bank(cfg)
    schedule = _family(dict(cfg, family="bridge"), bank)
    reports = run_diagnostics(bank, schedule, cfg)
    doc = {"config": cfg, "bank_hash": bank.content_hash(), "schedule": _family_dict(schedule),
           "reports": [r.as_dict() for r in reports]}
    _write_json(out / "diagnostics.json", doc)
    doc["failed"] = sum(not r.pass_ for r in reports)
    doc["objects"] = reports
    return doc


def format_report(rep) -> str:
    worst = rep.worst() or {}
    shown = {k: (round(v, 6) if isinstance(v, float) else v) for k, v in worst.items()
             if k in ("t", "R", "check", "M", "violation", "value", "lhs", "rhs", "norm", "bound")}
    return (f"{'PASS' if rep.pass_ else 'FAIL'} {rep.name:<13} probes={rep.probes:<5} "
            f"max_violation={rep.max_violation:.3e} worst={shown}")


# --------------------------------------------------------------------------- argparse

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowbank", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("generate", "forecast", "gridsearch", "ablate", "diagnose"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("-v", "--verbose", action="store_true")
        for key in DEFAULTS:
            flags = ["--" + key.replace("_", "-")]
            if "_" in key:
                flags.append("--" + key)
            flags += ["--" + a for a, k in FLAG_ALIASES.items() if k == key]
            sp.add_argument(*flags, dest=key, type=_parse_value, default=argparse.SUPPRESS,
                            metavar="VALUE")
    return p


COMMANDS = {"generate": cmd_generate, "forecast": cmd_forecast, "gridsearch": cmd_gridsearch,
            "ablate": cmd_ablate, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config")
    logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args, config_path)
        res = COMMANDS[command](cfg)
    except FlowbankError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg["out"])
    if command == "diagnose":
        for rep in res["objects"]:
            print(format_report(rep))
    elif command == "forecast":
        agg = res["metrics"]["aggregate"]
        print(_dumps({k: v for k, v in agg.items() if not k.endswith("_curve")}, indent=1))
    elif command == "gridsearch":
        print(f"best sigma_min={res['best']['sigma_min']:.6g} sigma={res['best']['sigma']:.6g} "
              f"error={res['best']['error']:.6g}")
    elif command == "ablate":
        for r in res["table"]:
            print(f"L={r['steps']:<4} {r['scheme']:<6} R={str(r['top_r']):<5} "
                  f"mean_smape={r.get('mean_smape')} mean_vpt={r.get('mean_vpt')}")
    else:
        print(f"wrote {len(res['manifest']['files'])} trajectories to {res['manifest']['directory']}")
    print(f"outputs in {out}")
    return 1 if res.get("failed") else 0


if __name__ == "__main__":
    sys.exit(main())
