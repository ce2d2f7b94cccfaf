"""Experiment harness.

Subcommands generate channel datasets, train unfolded models, compare against
the classical baselines, sweep depth/width grids, export per-layer (a, b)
traces, run density/size generalization studies, rerun the squared-rate
utility study, and check the distributed simulator. Every artifact embeds the
fully resolved config and all seeds; CSV bodies are byte-identical across
reruns below the single timestamp header line.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone

import numpy as np

from . import distsim, metrics, model, netgen, train, wmmse
from .netgen import ProblemConfig
from .train import _child_seed

SCHEMA_VERSION = 1
SIGMA_LOW = 2.6e-5
SIGMA_HIGH = 1.0

# seed-stream tags; must not collide with the netgen/model/train tags
_T_EVAL = 31
_T_GEN = 32
_T_POINT = 34

_MAX_WORKERS = min(8, os.cpu_count() or 1)


class UsageError(Exception):
    """Bad flags, bad config keys, or missing inputs; maps to exit code 1."""


# --- config resolution --------------------------------------------------------

_COMMON_DEFAULTS = {
    "seed": 0,
    "m": 20,
    "p_max": 1.0,
    "noise": "low",        # low | high
    "noise_std": None,     # explicit override; wins over the regime name
    "utility": "sum_rate",
    "weights": None,
}

_TRAIN_KEYS = {
    "K": 4,
    "F": 4,
    "variant": "gcn",
    "features": "ones",    # ones | distance
    "regime": "fixed",     # fixed | density | size
    "learning_rate": 1e-3,
    "batch_size": 64,
    "max_steps": 10000,
    "steps_per_epoch": 500,
    "max_epochs": 20,
    "patience": 3,
    "val_size": 256,
    "d_range": [0.5, 5.0],
    "m_range": [10, 30],
    "topology_seed": None,  # defaults to seed
    "loss_utility": None,   # training-loss utility when it differs from the update utility
    "regnn_layers": 3,
    "regnn_taps": 2,
}

_EVAL_KEYS = {
    "samples": None,        # defaults to test_samples
    "test_samples": 6400,
    "solver_iters": 100,
    "solver_tol": 1e-6,
    "trunc_iters": None,    # truncated-baseline depth; defaults to K
}

_COMMAND_DEFAULTS = {
    "gen": {"count": 64, "fixed_topology": True, "topology_seed": None},
    "train": {**_TRAIN_KEYS},
    "compare": {**_TRAIN_KEYS, **_EVAL_KEYS, "checkpoint": None, "train_inline": False},
    "sweep": {**_TRAIN_KEYS, **_EVAL_KEYS,
              "depth_grid": [2, 3, 4, 5, 6, 7], "width_grid": [2, 5, 10, 15]},
    "trace-ab": {**_EVAL_KEYS, "checkpoint": None},
    "generalize": {**_EVAL_KEYS, "checkpoint": None,
                   "robust_density_checkpoint": None, "robust_size_checkpoint": None,
                   "density_grid": [0.5, 0.75, 1.0, 2.0, 3.0, 4.0, 5.0],
                   "size_grid": [10, 15, 20, 25, 30]},
    "utility": {**_TRAIN_KEYS, **_EVAL_KEYS, "include_node_features": True},
    "distsim": {**_EVAL_KEYS, "checkpoint": None, "topology_seed": None},
    "serve": {"host": "127.0.0.1", "port": 8000, "checkpoints": None},
}


def _resolve_config(command: str, config_path, seed_override) -> dict:
    cfg = dict(_COMMON_DEFAULTS)
    cfg.update(_COMMAND_DEFAULTS[command])
    if config_path is not None:
        try:
            with open(config_path) as fh:
                loaded = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config is not valid JSON: {e}")
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config keys for {command!r}: {', '.join(unknown)}")
        cfg.update(loaded)
    if seed_override is not None:
        cfg["seed"] = seed_override
    if cfg.get("noise_std") is None:
        regimes = {"low": SIGMA_LOW, "high": SIGMA_HIGH}
        if cfg.get("noise") not in regimes:
            raise UsageError(f"noise must be one of {sorted(regimes)}")
        cfg["noise_std"] = regimes[cfg["noise"]]
    if cfg.get("samples", 0) is None:
        cfg["samples"] = cfg["test_samples"]
    return cfg


def _utility_kind(cfg) -> metrics.UtilityKind:
    try:
        return metrics.utility_from_name(cfg["utility"], cfg.get("weights"))
    except (ValueError, metrics.EvaluationError) as e:
        raise UsageError(str(e))


def _problem(cfg, kind=None) -> ProblemConfig:
    return ProblemConfig(noise_std=float(cfg["noise_std"]), p_max=float(cfg["p_max"]),
                         utility=kind if kind is not None else _utility_kind(cfg))


# --- artifact writers ---------------------------------------------------------

def _canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))  # shortest round-trip form; stable across reruns
    return str(x)


def write_csv(path, cfg: dict, header, rows) -> str:
    """Line 1 carries the timestamp; everything below is reproducible."""
    with open(path, "w") as fh:
        fh.write(f"# generated={datetime.now(timezone.utc).isoformat()}\n")
        fh.write(f"# config={_canonical(cfg)}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(x) for x in row) + "\n")
    return str(path)


def write_json(path, cfg: dict, body: dict) -> str:
    payload = {"schema_version": SCHEMA_VERSION,
               "generated": datetime.now(timezone.utc).isoformat(),
               "config": cfg}
    payload.update(body)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1, default=_json_default)
        fh.write("\n")
    return str(path)


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON-serializable: {type(x)!r}")


def _pmap(fn, items):
    """Order-preserving concurrent map for the evaluation loops."""
    if len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=_MAX_WORKERS) as pool:
        return list(pool.map(fn, items))


# --- shared evaluation machinery ----------------------------------------------

def _eval_fadings(pg: np.ndarray, m: int, seed: int, n: int, sub: int = 0):
    return [pg * netgen.sample_fading(m, _child_seed(seed, _T_EVAL, sub, i)) for i in range(n)]


def _feature_fn(name: str):
    if name == "ones":
        return None
    if name != "distance":
        raise UsageError(f"unknown feature set {name!r}")

    def build(topo):
        feats = netgen.node_distance_features(topo)
        mean = feats.mean(axis=0)
        std = np.maximum(feats.std(axis=0), 1e-12)
        return (feats - mean) / std

    return build


def _feature_stats(topo) -> dict:
    feats = netgen.node_distance_features(topo)
    return {"mean": feats.mean(axis=0).tolist(),
            "std": np.maximum(feats.std(axis=0), 1e-12).tolist()}


def _load_checkpoint(path, key: str):
    if not path:
        raise UsageError(f"missing required checkpoint path ({key})")
    try:
        params, info = model.load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}")
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise UsageError(f"unreadable checkpoint {path}: {e}")
    return params, (info.get("training") or {})


def _features_from_metadata(meta: dict, topo):
    """Rebuild the feature matrix a checkpoint was trained with."""
    desc = (meta or {}).get("features")
    if not desc or desc.get("name", "ones") == "ones":
        return None
    feats = netgen.node_distance_features(topo)
    mean = np.asarray(desc["mean"], dtype=float)
    std = np.asarray(desc["std"], dtype=float)
    return (feats - mean) / std


def _run_training(cfg: dict):
    """Train per the config; returns (report, sampler/topology info, metadata)."""
    kind = _utility_kind(cfg)
    if not kind.solver_ok:
        raise UsageError(f"utility {kind.name!r} cannot drive the layer updates")
    loss_kind = None
    if cfg.get("loss_utility"):
        loss_kind = metrics.utility_from_name(cfg["loss_utility"], cfg.get("weights"))
    problem = _problem(cfg, kind)
    f_in = 2 if cfg["features"] == "distance" else 1
    theta0 = model.init_params(cfg["seed"], F=int(cfg["F"]), F_in=f_in, K=int(cfg["K"]),
                               variant=cfg["variant"],
                               regnn_layers=int(cfg["regnn_layers"]),
                               regnn_taps=int(cfg["regnn_taps"]))
    tcfg = train.TrainConfig(
        learning_rate=float(cfg["learning_rate"]), batch_size=int(cfg["batch_size"]),
        max_steps=int(cfg["max_steps"]), steps_per_epoch=int(cfg["steps_per_epoch"]),
        max_epochs=int(cfg["max_epochs"]), patience=int(cfg["patience"]),
        val_size=int(cfg["val_size"]), regime=cfg["regime"],
        d_range=tuple(cfg["d_range"]), m_range=tuple(cfg["m_range"]), seed=int(cfg["seed"]))
    if cfg.get("topology_seed") is None:
        cfg["topology_seed"] = cfg["seed"]
    m, topo_seed = int(cfg["m"]), int(cfg["topology_seed"])
    meta = {"m": m, "topology_seed": topo_seed, "regime": cfg["regime"],
            "utility": kind.name, "noise_std": float(cfg["noise_std"]),
            "p_max": float(cfg["p_max"]), "K": int(cfg["K"]), "F": int(cfg["F"]),
            "variant": cfg["variant"], "features": {"name": cfg["features"]}}
    if cfg["regime"] == "fixed":
        sampler = train.make_sampler(tcfg, m, topo_seed, _feature_fn(cfg["features"]))
        if cfg["features"] == "distance":
            meta["features"].update(_feature_stats(sampler.topology))
        report = train.train(tcfg, sampler, theta0, problem, loss_utility=loss_kind)
    else:
        if cfg["features"] != "ones":
            raise UsageError("custom features require the fixed regime")
        report = train.train_robust(tcfg, m, topo_seed, theta0, problem, loss_utility=loss_kind)
    meta["best_val"] = report.best_val
    meta["stop_reason"] = report.stop_reason
    meta["steps_run"] = report.steps_run
    return report, meta


def _method_table(gains_list, q, params, problem, kind, opts, trunc_k,
                  extra_models=None, timed=False):
    """Per-sample utilities (and optional timings) for the standard methods.

    extra_models: list of (name, params, q, problem) evaluated alongside.
    Timed runs stay sequential so the clocks are honest.
    """
    names = ["wmmse", "trwmmse", "uwmmse"] + [e[0] for e in (extra_models or [])]
    vals = {n: [] for n in names}
    secs = {n: [] for n in names}
    iters = []

    def eval_one(h):
        out = {}
        t0 = time.perf_counter()
        full = wmmse.solve(h, opts)
        t1 = time.perf_counter()
        tr = wmmse.solve_truncated(h, opts, trunc_k)
        t2 = time.perf_counter()
        p, _ = model.forward(h, q, params, problem)
        t3 = time.perf_counter()
        sigma = opts.noise_std
        out["wmmse"] = (metrics.sum_utility(metrics.rates(full.p, h, sigma), kind), t1 - t0)
        out["trwmmse"] = (metrics.sum_utility(metrics.rates(tr.p, h, sigma), kind), t2 - t1)
        out["uwmmse"] = (metrics.sum_utility(metrics.rates(p, h, sigma), kind), t3 - t2)
        for name, xp, xq, xprob in (extra_models or []):
            t4 = time.perf_counter()
            pe, _ = model.forward(h, xq, xp, xprob)
            out[name] = (metrics.sum_utility(metrics.rates(pe, h, sigma), kind),
                         time.perf_counter() - t4)
        return out, full.iterations

    results = [eval_one(h) for h in gains_list] if timed else _pmap(eval_one, gains_list)
    for out, its in results:
        iters.append(its)
        for n in names:
            vals[n].append(out[n][0])
            secs[n].append(out[n][1])
    return ({n: np.asarray(v) for n, v in vals.items()},
            {n: np.asarray(v) for n, v in secs.items()}, np.asarray(iters))


# --- subcommands ---------------------------------------------------------------

def cmd_gen(cfg: dict, out: str) -> dict:
    """Write a self-describing NDJSON channel dataset."""
    m, count, seed = int(cfg["m"]), int(cfg["count"]), int(cfg["seed"])
    if count < 1:
        raise UsageError("count must be >= 1")
    if cfg.get("topology_seed") is None:
        cfg["topology_seed"] = seed
    sigma = float(cfg["noise_std"])
    docs = []
    for i in range(count):
        topo_seed = int(cfg["topology_seed"]) if cfg["fixed_topology"] else _child_seed(seed, _T_GEN, 1, i)
        fading_seed = _child_seed(seed, _T_GEN, 2, i)
        topo = netgen.sample_topology(m, topo_seed)
        fad = netgen.sample_fading(m, fading_seed)
        state = netgen.channel_state(topo, fad, topology_seed=topo_seed, fading_seed=fading_seed)
        docs.append(netgen.channel_document(topo, state, sigma))
    path = os.path.join(out, "channels.ndjson")
    n = netgen.write_channel_dataset(path, docs)
    summary = write_json(os.path.join(out, "gen_summary.json"), cfg,
                         {"written": n, "dataset": path})
    return {"written": n, "dataset": path, "summary": summary}


def _write_training_artifacts(cfg, out, report, meta, prefix=""):
    ckpt = os.path.join(out, f"{prefix}checkpoint.json")
    model.save_checkpoint(ckpt, report.best_params, seed=int(cfg["seed"]),
                          metadata={**meta, "config": cfg})
    write_csv(os.path.join(out, f"{prefix}loss_curve.csv"), cfg, ["step", "loss"],
              [(i, float(l)) for i, l in enumerate(report.losses)])
    write_csv(os.path.join(out, f"{prefix}val_curve.csv"), cfg, ["epoch", "val_utility"],
              [(e, float(v)) for e, v in report.val_curve])
    rep = write_json(os.path.join(out, f"{prefix}train_report.json"), cfg, {
        "best_epoch": report.best_epoch, "best_val": report.best_val,
        "stop_reason": report.stop_reason, "steps_run": report.steps_run,
        "wall_time_s": report.wall_time, "val_curve": [list(x) for x in report.val_curve],
        "checkpoint": ckpt})
    return ckpt, rep


def cmd_train(cfg: dict, out: str) -> dict:
    report, meta = _run_training(cfg)
    ckpt, rep = _write_training_artifacts(cfg, out, report, meta)
    return {"checkpoint": ckpt, "report": rep, "best_val": report.best_val,
            "stop_reason": report.stop_reason, "steps_run": report.steps_run}


def cmd_compare(cfg: dict, out: str) -> dict:
    """Per-sample utility and wall-clock comparison against the baselines."""
    if cfg["train_inline"]:
        report, meta = _run_training(cfg)
        params = report.best_params
        _write_training_artifacts(cfg, out, report, meta)
    else:
        params, meta = _load_checkpoint(cfg["checkpoint"], "checkpoint")
    m = cfg["m"] = int(meta.get("m", cfg["m"]))
    fallback = cfg["seed"] if cfg.get("topology_seed") is None else cfg["topology_seed"]
    topo_seed = cfg["topology_seed"] = int(meta.get("topology_seed", fallback))
    kind = _utility_kind(cfg)
    problem = ProblemConfig(noise_std=float(cfg["noise_std"]), p_max=float(cfg["p_max"]),
                            utility=_solver_kind(meta, kind))
    topo = netgen.sample_topology(m, topo_seed)
    q = _features_from_metadata(meta, topo)
    pg = netgen.path_gains(topo)
    gains = _eval_fadings(pg, m, int(cfg["seed"]), int(cfg["samples"]))
    opts = wmmse.SolveOptions(noise_std=float(cfg["noise_std"]), p_max=float(cfg["p_max"]),
                              max_iter=int(cfg["solver_iters"]), tol=float(cfg["solver_tol"]),
                              utility=kind if kind.solver_ok else metrics.sum_rate())
    trunc_k = int(cfg["trunc_iters"] or params.K)
    vals, secs, iters = _method_table(gains, q, params, problem, kind, opts, trunc_k, timed=True)

    rows = [(i, vals["wmmse"][i], vals["trwmmse"][i], vals["uwmmse"][i],
             secs["wmmse"][i], secs["trwmmse"][i], secs["uwmmse"][i])
            for i in range(len(gains))]
    csv = write_csv(os.path.join(out, "compare_per_sample.csv"), cfg,
                    ["sample", "wmmse", "trwmmse", "uwmmse",
                     "wmmse_s", "trwmmse_s", "uwmmse_s"], rows)
    summary = {
        "means": {n: float(vals[n].mean()) for n in vals},
        "stds": {n: float(vals[n].std()) for n in vals},
        "mean_seconds": {n: float(secs[n].mean()) for n in secs},
        "relative_time_uwmmse_vs_wmmse": float(secs["uwmmse"].mean() / max(secs["wmmse"].mean(), 1e-12)),
        "mean_solver_iterations": float(iters.mean()),
        "trunc_iters": trunc_k, "samples": len(gains), "per_sample_csv": csv,
    }
    path = write_json(os.path.join(out, "compare_summary.json"), cfg, summary)
    return {"summary": path, **summary["means"]}


def _solver_kind(meta: dict, fallback):
    name = (meta or {}).get("utility")
    if name:
        return metrics.utility_from_name(name)
    return fallback if fallback.solver_ok else metrics.sum_rate()


def cmd_sweep(cfg: dict, out: str) -> dict:
    """Depth and width grids, one training per distinct (K, F) point."""
    depth = [int(k) for k in cfg["depth_grid"]]
    width = [int(f) for f in cfg["width_grid"]]
    if not depth and not width:
        raise UsageError("both sweep grids are empty")
    points = [("depth", k, int(cfg["F"])) for k in depth]
    points += [("width", int(cfg["K"]), f) for f in width]
    kind = _utility_kind(cfg)
    if cfg.get("topology_seed") is None:
        cfg["topology_seed"] = cfg["seed"]
    m, topo_seed = int(cfg["m"]), int(cfg["topology_seed"])
    topo = netgen.sample_topology(m, topo_seed)
    pg = netgen.path_gains(topo)
    gains = _eval_fadings(pg, m, int(cfg["seed"]), int(cfg["samples"]))
    problem = _problem(cfg, kind)

    trained = {}  # (K, F) -> report; grids sharing a point share the training
    rows = []
    for grid, k, f in points:
        if (k, f) not in trained:
            report, _ = _run_training({**cfg, "K": k, "F": f})
            trained[(k, f)] = report
        report = trained[(k, f)]
        q = None  # sweep always trains on the default all-ones features

        def util(h, p=report.best_params):
            pw, _ = model.forward(h, q, p, problem)
            return metrics.sum_utility(metrics.rates(pw, h, problem.noise_std), kind)

        vals = np.asarray(_pmap(util, gains))
        rows.append((grid, k, f, float(vals.mean()), float(vals.std()),
                     report.best_val, report.steps_run, report.wall_time))
    csv = write_csv(os.path.join(out, "sweep.csv"), cfg,
                    ["grid", "K", "F", "mean_utility", "std_utility",
                     "best_val", "steps_run", "wall_time_s"], rows)
    return {"csv": csv, "points": len(rows), "trainings": len(trained)}


def cmd_trace_ab(cfg: dict, out: str) -> dict:
    """Raw per-layer (a, b) values plus fixed-point residuals."""
    params, meta = _load_checkpoint(cfg["checkpoint"], "checkpoint")
    m = cfg["m"] = int(meta.get("m", cfg["m"]))
    topo_seed = cfg["topology_seed"] = int(meta.get("topology_seed", cfg["seed"]))
    kind = _solver_kind(meta, _utility_kind(cfg))
    problem = ProblemConfig(noise_std=float(cfg["noise_std"]), p_max=float(cfg["p_max"]),
                            utility=kind)
    topo = netgen.sample_topology(m, topo_seed)
    q = _features_from_metadata(meta, topo)
    pg = netgen.path_gains(topo)
    gains = _eval_fadings(pg, m, int(cfg["seed"]), int(cfg["samples"]))
    opts = wmmse.SolveOptions(noise_std=problem.noise_std, p_max=problem.p_max,
                              max_iter=int(cfg["solver_iters"]), tol=float(cfg["solver_tol"]),
                              utility=kind)

    def run_one(h):
        _, trace = model.forward(h, q, params, problem)
        fp = wmmse.solve(h, opts)
        res = model.theorem1_residual(trace, fp, h) if fp.converged else None
        return trace, res

    results = _pmap(run_one, gains)
    ab_rows, res_rows, skipped = [], [], 0
    frac_low = np.zeros((len(gains), params.K))
    for s, (trace, res) in enumerate(results):
        for k in range(params.K):
            frac_low[s, k] = float((trace.b[k] < 0.1).mean())
            for i in range(m):
                ab_rows.append((s, k + 1, i, float(trace.a[k][i]), float(trace.b[k][i])))
        if res is None:
            skipped += 1
            continue
        for k in range(params.K):
            for i in range(m):
                if res.active[i]:
                    res_rows.append((s, k + 1, i, float(res.residuals[k, i])))
    ab_csv = write_csv(os.path.join(out, "ab_values.csv"), cfg,
                       ["sample", "layer", "node", "a", "b"], ab_rows)
    res_csv = write_csv(os.path.join(out, "residuals.csv"), cfg,
                        ["sample", "layer", "node", "residual"], res_rows)
    wins = float((frac_low[:, -1] > frac_low[:, 0]).mean())
    summary = write_json(os.path.join(out, "trace_ab_summary.json"), cfg, {
        "mean_frac_b_below_0.1_per_layer": frac_low.mean(axis=0).tolist(),
        "frac_samples_last_layer_exceeds_first": wins,
        "mean_abs_residual": float(np.mean(np.abs([r[3] for r in res_rows]))) if res_rows else None,
        "samples_without_fixed_point": skipped,
        "ab_csv": ab_csv, "residuals_csv": res_csv})
    return {"summary": summary, "win_fraction": wins, "skipped": skipped}


def cmd_generalize(cfg: dict, out: str) -> dict:
    """Density and size sweeps for fixed vs robust models plus the baselines."""
    params, meta = _load_checkpoint(cfg["checkpoint"], "checkpoint")
    has_density = bool(cfg["robust_density_checkpoint"])
    has_size = bool(cfg["robust_size_checkpoint"])
    if not has_density and not has_size:
        raise UsageError("at least one robust checkpoint is required")
    kind = metrics.sum_rate()  # the study is defined on sum-rate
    sigma, pmax = float(cfg["noise_std"]), float(cfg["p_max"])
    problem = ProblemConfig(noise_std=sigma, p_max=pmax, utility=kind)
    opts = wmmse.SolveOptions(noise_std=sigma, p_max=pmax,
                              max_iter=int(cfg["solver_iters"]), tol=float(cfg["solver_tol"]))
    m = cfg["m"] = int(meta.get("m", cfg["m"]))
    cfg["topology_seed"] = int(meta.get("topology_seed", cfg["seed"]))
    base = netgen.sample_topology(m, cfg["topology_seed"])
    n = int(cfg["samples"])
    seed = int(cfg["seed"])
    trunc_k = int(cfg["trunc_iters"] or params.K)

    def sweep(points, make_topo, robust_params, label):
        rows = []
        edge = {}
        for pi, point in enumerate(points):
            def one(i, point=point, pi=pi):
                s = _child_seed(seed, _T_POINT, pi, i)
                topo = make_topo(point, s)
                h = netgen.path_gains(topo) * netgen.sample_fading(topo.m, s)
                full = wmmse.solve(h, opts).p
                tr = wmmse.solve_truncated(h, opts, trunc_k).p
                pu, _ = model.forward(h, None, params, problem)
                pr, _ = model.forward(h, None, robust_params, problem)
                return [metrics.rates(x, h, sigma).sum() for x in (full, tr, pu, pr)]

            vals = np.asarray(_pmap(one, list(range(n))))
            for j, name in enumerate(("wmmse", "trwmmse", "uwmmse", "ro_uwmmse")):
                rows.append((label, point, name, float(vals[:, j].mean()),
                             float(vals[:, j].std()), n))
            edge[point] = (float(vals[:, 2].mean()), float(vals[:, 3].mean()))
        return rows, edge

    body, artifacts = {}, {}
    if has_density:
        ro_d, _ = _load_checkpoint(cfg["robust_density_checkpoint"], "robust_density_checkpoint")
        grid = [float(d) for d in cfg["density_grid"]]
        rows, edge = sweep(grid, lambda d, s: netgen.scale_density(base, d, s), ro_d, "density")
        artifacts["density_csv"] = write_csv(
            os.path.join(out, "density_sweep.csv"), cfg,
            ["grid", "point", "method", "mean_sum_rate", "std_sum_rate", "samples"], rows)
        dmax = max(grid)
        body["density_edge"] = {"d": dmax, "uwmmse": edge[dmax][0], "ro_uwmmse": edge[dmax][1],
                                "robust_wins": edge[dmax][1] >= edge[dmax][0]}
    if has_size:
        ro_s, _ = _load_checkpoint(cfg["robust_size_checkpoint"], "robust_size_checkpoint")
        grid = [int(v) for v in cfg["size_grid"]]
        rows, edge = sweep(grid, lambda mm, s: netgen.resize_network(base, mm, s), ro_s, "size")
        artifacts["size_csv"] = write_csv(
            os.path.join(out, "size_sweep.csv"), cfg,
            ["grid", "point", "method", "mean_sum_rate", "std_sum_rate", "samples"], rows)
        mmax = max(grid)
        body["size_edge"] = {"m": mmax, "uwmmse": edge[mmax][0], "ro_uwmmse": edge[mmax][1],
                             "robust_wins": edge[mmax][1] >= edge[mmax][0]}
    body.update(artifacts)
    summary = write_json(os.path.join(out, "generalize_summary.json"), cfg, body)
    return {"summary": summary, **{k: v for k, v in body.items() if k.endswith("_edge")}}


def cmd_utility(cfg: dict, out: str) -> dict:
    """Squared-rate study: learned vs fixed update rule, full vs half budget."""
    if cfg["utility"] not in ("sum_rate", "sum_squared_rate"):
        raise UsageError("the utility study is defined for sum_squared_rate")
    squared = metrics.sum_squared_rate()
    if cfg.get("topology_seed") is None:
        cfg["topology_seed"] = cfg["seed"]
    m, topo_seed, seed = int(cfg["m"]), int(cfg["topology_seed"]), int(cfg["seed"])
    topo = netgen.sample_topology(m, topo_seed)
    pg = netgen.path_gains(topo)
    gains = _eval_fadings(pg, m, seed, int(cfg["samples"]))
    sigma, pmax = float(cfg["noise_std"]), float(cfg["p_max"])
    half = max(1, int(cfg["max_steps"]) // 2)

    # modified = squared-rate weights inside the layer update; unmodified keeps
    # the sum-rate update and only the training loss switches
    runs = {
        ("uwmmse", "modified"): {"utility": "sum_squared_rate"},
        ("uwmmse", "unmodified"): {"utility": "sum_rate", "loss_utility": "sum_squared_rate"},
        ("uwmmse_ld", "modified"): {"utility": "sum_squared_rate", "max_steps": half},
        ("uwmmse_ld", "unmodified"): {"utility": "sum_rate", "loss_utility": "sum_squared_rate",
                                      "max_steps": half},
    }
    rows = []
    for (name, update), patch in runs.items():
        report, meta = _run_training({**cfg, **patch})
        prob = ProblemConfig(noise_std=sigma, p_max=pmax,
                             utility=metrics.utility_from_name(patch["utility"]))

        def util(h, p=report.best_params, prob=prob):
            pw, _ = model.forward(h, None, p, prob)
            return metrics.sum_utility(metrics.rates(pw, h, sigma), squared)

        vals = np.asarray(_pmap(util, gains))
        rows.append((name, update, float(vals.mean()), float(vals.std())))

    for update, kind in (("modified", squared), ("unmodified", metrics.sum_rate())):
        opts = wmmse.SolveOptions(noise_std=sigma, p_max=pmax,
                                  max_iter=int(cfg["solver_iters"]),
                                  tol=float(cfg["solver_tol"]), utility=kind)

        def solve_util(h, opts=opts, k=None):
            p = (wmmse.solve(h, opts) if k is None else wmmse.solve_truncated(h, opts, k)).p
            return metrics.sum_utility(metrics.rates(p, h, sigma), squared)

        trunc_k = int(cfg["trunc_iters"] or cfg["K"])
        v_full = np.asarray(_pmap(solve_util, gains))
        v_tr = np.asarray(_pmap(lambda h: solve_util(h, k=trunc_k), gains))
        rows.append(("wmmse", update, float(v_full.mean()), float(v_full.std())))
        rows.append(("trwmmse", update, float(v_tr.mean()), float(v_tr.std())))

    csv = write_csv(os.path.join(out, "utility_table.csv"), cfg,
                    ["method", "update", "mean_utility", "std_utility"], rows)
    result = {"csv": csv}

    if cfg["include_node_features"]:
        sum_kind = metrics.sum_rate()
        feat_rows = []
        for feats in ("ones", "distance"):
            report, meta = _run_training({**cfg, "utility": "sum_rate", "loss_utility": None,
                                          "features": feats})
            prob = ProblemConfig(noise_std=sigma, p_max=pmax, utility=sum_kind)
            q = _features_from_metadata(meta, topo)

            def util(h, p=report.best_params, q=q, prob=prob):
                pw, _ = model.forward(h, q, p, prob)
                return float(metrics.rates(pw, h, sigma).sum())

            vals = np.asarray(_pmap(util, gains))
            feat_rows.append((feats, float(vals.mean()), float(vals.std())))
        result["node_features_csv"] = write_csv(
            os.path.join(out, "node_features.csv"), cfg,
            ["features", "mean_sum_rate", "std_sum_rate"], feat_rows)

    summary = write_json(os.path.join(out, "utility_summary.json"), cfg,
                         {"table": [list(r) for r in rows], **result})
    return {"summary": summary, **result}


def cmd_distsim(cfg: dict, out: str) -> dict:
    """Distributed-equivalence check with message accounting."""
    params, meta = _load_checkpoint(cfg["checkpoint"], "checkpoint")
    if (meta or {}).get("features", {}).get("name", "ones") != "ones":
        raise UsageError("the distributed schedule assumes the default all-ones features")
    m = cfg["m"] = int(meta.get("m", cfg["m"]))
    topo_seed = cfg["topology_seed"]
    topo_seed = int(meta.get("topology_seed", cfg["seed"])) if topo_seed is None else int(topo_seed)
    cfg["topology_seed"] = topo_seed
    kind = _solver_kind(meta, _utility_kind(cfg))
    problem = ProblemConfig(noise_std=float(cfg["noise_std"]), p_max=float(cfg["p_max"]),
                            utility=kind)
    pg = netgen.path_gains(netgen.sample_topology(m, topo_seed))
    n = int(cfg["samples"])
    gains = _eval_fadings(pg, m, int(cfg["seed"]), n)

    def one(h):
        p_ref, _ = model.forward(h, None, params, problem)
        p_dist, log = distsim.run_distributed(h, None, params, problem)
        return float(np.abs(p_ref - p_dist).max()), log

    results = _pmap(one, gains)
    devs = np.asarray([r[0] for r in results])
    log0 = results[0][1]
    expected = distsim.message_count(m, params.K)
    counts_ok = (params.psi_variant != "gcn") or (log0.broadcasts == expected.broadcasts)
    write_csv(os.path.join(out, "messages.csv"), cfg,
              ["layer", "phase", "sender", "bytes"], log0.to_rows())
    body = {"max_deviation": float(devs.max()), "mean_deviation": float(devs.mean()),
            "broadcasts": log0.broadcasts, "directed_messages": log0.directed(m),
            "expected_broadcasts": expected.broadcasts if params.psi_variant == "gcn" else None,
            "counts_match": bool(counts_ok), "gain_reads": log0.gain_reads, "samples": n}
    summary = write_json(os.path.join(out, "distsim_report.json"), cfg, body)
    if devs.max() >= 1e-9:
        raise RuntimeError(f"distributed run deviates from centralized: {devs.max():g}")
    if not counts_ok:
        raise RuntimeError("message count does not match the 3mK schedule")
    return {"summary": summary, "max_deviation": float(devs.max()),
            "broadcasts": log0.broadcasts}


def cmd_serve(cfg: dict, out: str) -> dict:
    import uvicorn

    from .service import create_app

    app = create_app(checkpoints=cfg.get("checkpoints") or {})
    uvicorn.run(app, host=cfg["host"], port=int(cfg["port"]))
    return {}


_HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "trace-ab": cmd_trace_ab,
    "generalize": cmd_generalize,
    "utility": cmd_utility,
    "distsim": cmd_distsim,
    "serve": cmd_serve,
}


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract wants 1 for usage errors
    def error(self, message):
        raise UsageError(message)


def main(argv=None) -> int:
    parser = _Parser(prog="uwmmse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in _HANDLERS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", default=".", help="artifact directory")
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        cfg = _resolve_config(args.command, args.config, args.seed)
        os.makedirs(args.out, exist_ok=True)
        result = _HANDLERS[args.command](cfg, args.out)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - the contract maps any failure to 2
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
