"""Command-line entry point: ``svlab train | verify | plotdata``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from .approximators import ActorCritic, one_hot_features, project_to_tabular, save_checkpoint
from .config import ConfigError, RunConfig, list_presets, load_config
from .loop import RECORD_FIELDS, TrainingError, train
from .mdp import TabularMdp, build_four_rooms, build_random_mdp
from .oracle import evaluate_policy_exact, value_iteration
from .suites import SUITES, run_suite

OUT_ENV = "SVLAB_OUT"
DEFAULT_OUT = "runs"
GRID_FIELDS = ["round", "row", "col", "value_pred", "value_true", "visitation"]


def default_out() -> str:
    return os.environ.get(OUT_ENV, DEFAULT_OUT)


def version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def parse_seeds(text: str) -> list:
    """``"3"`` -> [3], ``"0,2"`` -> [0, 2], ``"0-4"`` -> [0, 1, 2, 3, 4]."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError(f"no seeds in {text!r}")
    return seeds


def build_mdp(cfg: RunConfig) -> TabularMdp:
    env = cfg.env
    if env.env == "four_rooms":
        return build_four_rooms(env.slip_prob, cfg.ppo.gamma)
    if env.env == "random":
        return build_random_mdp(env.num_states, env.num_actions, cfg.ppo.gamma, env.mdp_seed)
    raise ConfigError(f"unknown env {env.env!r}")


def build_actor_critic(cfg: RunConfig, mdp: TabularMdp, seed: int) -> ActorCritic:
    return ActorCritic.create(one_hot_features(mdp.num_states), mdp.num_actions, hidden=cfg.ppo.hidden, seed=seed)


class GridWriter:
    """Per-round grid snapshots: value prediction, exact target value, smoothed visitation."""

    def __init__(self, path: Path, mdp: TabularMdp, decay: float = 0.9):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(GRID_FIELDS)
        self.mdp = mdp
        self.decay = decay
        self.visits = None

    def __call__(self, k, ac, target, batch):
        counts = np.bincount(np.asarray(batch.states).ravel(), minlength=self.mdp.num_states)
        freq = counts / counts.sum()
        self.visits = freq if self.visits is None else self.decay * self.visits + (1 - self.decay) * freq
        pred = ac.values(np.arange(self.mdp.num_states))
        true = evaluate_policy_exact(self.mdp, project_to_tabular(ac, target)).v
        for s, (r, c) in enumerate(self.mdp.coords):
            self.writer.writerow([k, r, c, repr(float(pred[s])), repr(float(true[s])), repr(float(self.visits[s]))])

    def close(self):
        self.fh.close()


def run_seed(cfg: RunConfig, seed: int, out_dir: Path, snapshots: bool = False) -> dict:
    """Train one seed, streaming its records to ``seed_<n>.csv``."""
    mdp = build_mdp(cfg)
    ac = build_actor_critic(cfg, mdp, seed)
    path = out_dir / f"seed_{seed}.csv"
    entry = {"seed": seed, "records": path.name, "error": None}
    grid = None
    if snapshots and mdp.coords is not None:
        grid_path = out_dir / f"seed_{seed}_grid.csv"
        grid = GridWriter(grid_path, mdp)
        entry["grid"] = grid_path.name
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        writer.writeheader()

        def emit(rec):
            row = asdict(rec)
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

        try:
            res = train(mdp, ac, cfg.gate, cfg.ppo, cfg.total_rounds, seed,
                        track_exact=cfg.track_exact, on_round=emit, snapshot_hook=grid)
        except TrainingError as exc:
            entry["error"] = str(exc)
            return entry
        finally:
            if grid is not None:
                grid.close()
    ckpt = out_dir / f"seed_{seed}.ckpt"
    save_checkpoint(ckpt, res.actor_critic)
    entry["checkpoint"] = ckpt.name
    entry["target_updates"] = len(res.target_update_rounds)
    entry["final_v_target"] = float(evaluate_policy_exact(mdp, project_to_tabular(ac, res.target)).v[mdp.initial_state])
    entry["final_v_behavior"] = float(evaluate_policy_exact(mdp, project_to_tabular(ac)).v[mdp.initial_state])
    return entry


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(1)


def cmd_train(cfg: RunConfig, seeds, out_dir, deterministic=False, jobs=1, snapshots=False) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    if deterministic:
        _single_thread()
        jobs = 1
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(run_seed, [cfg] * len(seeds), seeds, [out] * len(seeds),
                                    [snapshots] * len(seeds)))
    else:
        entries = [run_seed(cfg, s, out, snapshots) for s in seeds]
    mdp = build_mdp(cfg)
    v_star = float(value_iteration(mdp)[0][mdp.initial_state])
    manifest = {
        "name": cfg.name,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "seeds": list(seeds),
        "runs": entries,
        "optimal_value": v_star,
        "wall_clock_s": time.perf_counter() - start,
        "version": version(),
        "deterministic": bool(deterministic),
    }
    (out / "manifest.json").write_text(_dump(manifest))
    return manifest


def _jsonable(x):
    # strict JSON has no inf/nan literals
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n"


def cmd_verify(suites, instances=None, seed=0) -> dict:
    report = {"seed": seed, "suites": {}}
    for name in suites:
        t0 = time.perf_counter()
        res = run_suite(name, instances, seed)
        d = res.to_dict()
        d["seconds"] = time.perf_counter() - t0
        report["suites"][name] = d
    report["violations"] = sum(s["violations"] for s in report["suites"].values())
    report["passed"] = report["violations"] == 0
    return report


def read_records(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_manifest_runs(manifest_path):
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    runs = []
    for entry in manifest["runs"]:
        rec = path.parent / entry["records"]
        if not rec.exists():
            raise FileNotFoundError(f"missing record file {rec}")
        runs.append(read_records(rec))
    if not runs:
        raise ValueError(f"{path} lists no runs")
    return manifest, runs


def _per_round(runs, key):
    n = min(len(r) for r in runs)
    return np.array([[float(r[i][key]) for i in range(n)] for r in runs])


def write_plot_csvs(runs, out: Path, baseline_runs=None) -> list:
    """Per-figure CSVs, one column per seed plus the median, joined on round."""
    specs = {
        "learning_curve": ["v_target", "v_behavior", "mean_return"],
        "gate_trace": ["scaled_diff", "threshold", "target_updated"],
        "dynamics": ["tv_mu", "value_error_sq", "value_error_abs", "diff_cross_round"],
    }
    groups = [("sv", runs)] + ([("baseline", baseline_runs)] if baseline_runs else [])
    n = min(len(r) for _, rs in groups for r in rs)
    paths = []
    for fig, keys in specs.items():
        header, cols = ["round"], [np.arange(n)]
        for tag, rs in groups:
            for key in keys:
                if key == "target_updated":
                    vals = np.array([[str(r[i][key]).lower() in ("true", "1") for i in range(n)] for r in rs], float)
                else:
                    vals = _per_round(rs, key)[:, :n]
                for j, row in enumerate(vals):
                    header.append(f"{tag}_{key}_seed{j}")
                    cols.append(row)
                if key != "target_updated":
                    header.append(f"{tag}_{key}_median")
                    with np.errstate(all="ignore"):
                        cols.append(np.nanmedian(vals, axis=0) if not np.all(np.isnan(vals)) else vals[0])
        p = out / f"{fig}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(n):
                w.writerow([int(cols[0][i])] + [repr(float(c[i])) for c in cols[1:]])
        paths.append(p)
    return paths


def cmd_plotdata(manifest_path, out_dir=None, baseline=None, figures=True, fmt="svg") -> list:
    manifest, runs = load_manifest_runs(manifest_path)
    base_runs = load_manifest_runs(baseline)[1] if baseline else None
    mp = Path(manifest_path)
    out = Path(out_dir) if out_dir else (mp if mp.is_dir() else mp.parent) / "plots"
    out.mkdir(parents=True, exist_ok=True)
    paths = write_plot_csvs(runs, out, base_runs)
    if figures:
        from .plotting import render_all

        paths += render_all(runs, out, manifest.get("optimal_value"), base_runs, fmt=fmt)
    return paths


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svlab", description="Stable value PPO experiments and exact checks.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one or more seeds from a config")
    t.add_argument("--config", required=True, help=f"config file or preset ({', '.join(list_presets())})")
    t.add_argument("--seeds", default=None, help="e.g. 0,1,2 or 0-4 (default: the config's seed)")
    t.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT}/<name>)")
    t.add_argument("--rounds", type=int, default=None, help="override total_rounds")
    t.add_argument("--deterministic", action="store_true", help="single-threaded, seeds run in sequence")
    t.add_argument("--jobs", type=int, default=1, help="seeds trained in parallel processes")
    t.add_argument("--snapshots", action="store_true", help="write per-round grid snapshots")

    v = sub.add_parser("verify", help="run exact verification suites")
    v.add_argument("--suite", default="all", help=f"all or one of: {', '.join(SUITES)}")
    v.add_argument("--instances", type=int, default=None, help="instances per suite (default: suite size)")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default=None, help="JSON report path (default: print only)")
    v.add_argument("--deterministic", action="store_true", help="single-threaded linear algebra")

    d = sub.add_parser("plotdata", help="per-figure CSVs and figures from a training manifest")
    d.add_argument("manifest", help="manifest.json or the run directory holding it")
    d.add_argument("--baseline", default=None, help="manifest of a baseline run to pair with")
    d.add_argument("--out", default=None, help="output directory (default: <run>/plots)")
    d.add_argument("--no-figures", action="store_true", help="CSV only")
    d.add_argument("--format", default="svg", choices=["svg", "png", "pdf"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cfg = load_config(args.config)
            if args.rounds is not None:
                cfg = replace(cfg, total_rounds=args.rounds)
            seeds = parse_seeds(args.seeds) if args.seeds else [cfg.seed]
            out = args.out or os.path.join(default_out(), cfg.name)
            manifest = cmd_train(cfg, seeds, out, args.deterministic, args.jobs, args.snapshots)
            for e in manifest["runs"]:
                if e["error"]:
                    print(f"seed {e['seed']}: aborted: {e['error']}")
                else:
                    print(f"seed {e['seed']}: V_target(s0)={e['final_v_target']:.4f} "
                          f"updates={e['target_updates']}")
            print(f"V*(s0)={manifest['optimal_value']:.4f}  manifest: {Path(out) / 'manifest.json'}")
            return 1 if any(e["error"] for e in manifest["runs"]) else 0
        if args.command == "verify":
            if args.deterministic:
                _single_thread()
            names = list(SUITES) if args.suite == "all" else [args.suite]
            for n in names:
                if n not in SUITES:
                    raise KeyError(f"unknown suite {n!r}; choose from {', '.join(SUITES)}")
            report = cmd_verify(names, args.instances, args.seed)
            for name, s in report["suites"].items():
                status = "ok  " if s["passed"] else "FAIL"
                print(f"{status} {name:12s} instances={s['instances']:4d} violations={s['violations']} "
                      f"worst_slack={s['worst_slack']:.3e}")
            if args.out:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(_dump(report))
            return 0 if report["passed"] else 1
        if args.command == "plotdata":
            for p in cmd_plotdata(args.manifest, args.out, args.baseline, not args.no_figures, args.format):
                print(p)
            return 0
    except (ConfigError, KeyError, FileNotFoundError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"svlab: error: {msg}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
