"""Command line entry point: train, eval, sweep and plot.

Exit codes: 0 success, 1 invalid input (config, checkpoint mismatch, existing
run directory), 2 runtime abort (non-finite loss during training).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import warnings
from collections import defaultdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import evalharness, ganet, masac, plotting
from .config import ConfigError, fingerprint, load_config, to_dict

RUN_ROOT_ENV = "SUBNETMARL_RUN_ROOT"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("subnetmarl")


class InvalidInput(Exception):
    pass


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def code_version() -> str:
    """Digest of the package sources, recorded in every manifest."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def fresh_dir(path: Path) -> Path:
    """Create a new run directory; refuse to touch an existing non-empty one."""
    if path.exists() and any(path.iterdir()):
        raise InvalidInput(f"run directory {path} already exists; refusing to modify it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out: Path, command: str, configs, raw, seed) -> Path:
    env, trainer, exp = configs
    manifest = {
        "command": command,
        "seed": seed,
        "env": to_dict(env),
        "trainer": to_dict(trainer),
        "experiment": to_dict(exp),
        "raw_config": raw,
        "env_fingerprint": fingerprint(env),
        "code_version": code_version(),
        "started": _now(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def write_completion(out: Path, status: str, **extra):
    (out / "completion.json").write_text(json.dumps({"status": status, "finished": _now(), **extra}, indent=2))


def _load(args):
    overrides = list(args.override or [])
    if getattr(args, "deterministic", None) is not None:
        overrides.append(f"trainer.deterministic={str(args.deterministic).lower()}")
    configs, raw = load_config(args.config, overrides)
    env, trainer, exp = configs
    seed = env.seed if args.seed is None else args.seed
    env = env.replace(seed=seed)
    return (env, trainer, exp), raw, seed


# -- commands -----------------------------------------------------------------


def cmd_train(args) -> int:
    configs, raw, seed = _load(args)
    env, trainer, _ = configs
    name = f"train-{fingerprint(env)}-{trainer.algorithm}-seed{seed}"
    out = fresh_dir(Path(args.out) if args.out else run_root() / name)
    write_manifest(out, "train", configs, raw, seed)
    metrics_path = out / "metrics.jsonl"

    def progress(row):
        if args.verbose:
            print(f"episode {row['episode']} mean_reward {row['mean_reward']:.4f}", file=sys.stderr)

    try:
        res = masac.train(env, trainer, seed=seed, out_dir=out, metrics_path=metrics_path, progress=progress)
    except masac.TrainingAborted as exc:
        write_completion(out, "aborted", error=str(exc))
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    digest = file_digest(metrics_path) if metrics_path.exists() else None
    write_completion(out, "ok", metrics_digest=digest)
    print(json.dumps({"run_dir": str(out), "checkpoint": str(res.checkpoint), "metrics_digest": digest}))
    return EXIT_OK


def cmd_eval(args) -> int:
    configs, raw, seed = _load(args)
    env = configs[0]
    if args.episodes < 1:
        raise InvalidInput(f"episodes must be >= 1 (got {args.episodes})")
    actors, blob = ganet.load_actors(args.checkpoint, fingerprint(env))
    res = evalharness.evaluate_variant("ganet_full", env, args.episodes, seed=seed, checkpoint=actors,
                                       record_trace=args.trace)
    fails = int(res.failures.sum())
    lo, hi = evalharness.binomial_ci(fails, res.failures.size)
    report = {
        "checkpoint_digest": file_digest(args.checkpoint),
        "env_fingerprint": fingerprint(env),
        "seed": seed,
        "episodes": args.episodes,
        "outage": res.outage,
        "outage_ci95": [lo, hi],
        "mean_reward": res.mean_reward,
        "per_agent_outage": [float(v) for v in res.per_agent_outage],
        "per_agent_reward": [float(v) for v in res.rewards.mean(0)],
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    key = hashlib.sha256(text.encode()).hexdigest()[:12]
    out = Path(args.out) if args.out else run_root() / f"eval-{key}"
    if (out / "report.json").exists() and (out / "report.json").read_text() == text:
        # same report already persisted by an identical earlier run
        return EXIT_OK
    out = fresh_dir(out)
    (out / "report.json").write_text(text)
    if args.trace:
        with open(out / "trace.jsonl", "w") as fh:
            for row in res.trace:
                fh.write(json.dumps(row) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    configs, raw, seed = _load(args)
    env, trainer, exp = configs
    if exp.sweep == "none":
        raise ConfigError("experiment.sweep must be density or bandwidth for the sweep command")
    root = Path(args.out) if args.out else run_root()
    out = fresh_dir(root / exp.scenario)
    write_manifest(out, "sweep", configs, raw, seed)
    trained = any(v in evalharness.baselines.TRAINED for v in exp.variants)
    records = evalharness.run_sweep(exp, env, trainer=trainer if trained else None, root=root)
    write_completion(out, "ok", records_digest=file_digest(out / "records.jsonl"))
    for r in records:
        print(f"{r.variant}\t{exp.sweep}={r.value:g}\tseed={r.seed}\toutage={r.outage:.4f}"
              f"\t[{r.ci_low:.4f}, {r.ci_high:.4f}]\treward={r.mean_reward:.4f}\t{r.status}")
    return EXIT_OK


def _timeline_from_trace(rows):
    n = max(r["agent"] for r in rows) + 1
    t_max = max(r["tti"] for r in rows)
    tl = np.zeros((t_max + 1, n))
    for r in rows:
        tl[r["tti"], r["agent"]] = r["remaining_bits"]
        if r["tti"] == 1:
            tl[0, r["agent"]] = r["remaining_bits"] + r["delivered_bits"]
    return tl


def cmd_plot(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise InvalidInput(f"{run_dir} is not a directory")
    out = Path(args.out) if args.out else run_dir.with_name(run_dir.name + "-plots")
    made = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        metrics = defaultdict(list)
        for path in sorted(run_dir.rglob("metrics.jsonl")):
            rel = path.parent.relative_to(run_dir)
            key = str(rel) if str(rel) != "." else run_dir.name
            metrics[key] = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
        if metrics:
            made.append(plotting.render_plots(dict(metrics), "reward", out))
        top = run_dir / "records.jsonl"
        rec_files = [top] if top.exists() else sorted(run_dir.rglob("records.jsonl"))
        for path in rec_files:
            records = evalharness.read_records(path)
            name = "outage" if path == top else "outage-" + "-".join(path.parent.relative_to(run_dir).parts)
            made.append(plotting.render_plots(records, "outage", out, name=name))
        for path in sorted(run_dir.rglob("trace.jsonl")):
            rows = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
            first = [r for r in rows if r.get("episode", 0) == 0]
            if first:
                made.append(plotting.render_plots(first, "timeline", out))
                made.append(plotting.render_plots(_timeline_from_trace(first), "payload", out))
    made = [m for m in made if m]
    if not made:
        print(f"warning: nothing to plot in {run_dir}", file=sys.stderr)
        return EXIT_OK
    for image, data in made:
        print(f"{image}\t{data}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subnetmarl", description="Channel/power selection for mobile subnetworks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--override", action="append", metavar="KEY=VALUE", help="repeatable config override")
        sp.add_argument("--out", default=None, help=f"output directory (default under ${RUN_ROOT_ENV} or ./runs)")
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)

    sp = sub.add_parser("train", help="train a policy")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="greedy decentralized evaluation of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--episodes", type=int, default=100)
    sp.add_argument("--trace", action="store_true", help="also persist the per-TTI trace")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="run a density or bandwidth sweep")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("plot", help="render figures from a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_INVALID
    except (InvalidInput, ganet.CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except masac.TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
