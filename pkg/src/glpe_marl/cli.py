"""Command-line entry point: ``glpe-marl {toy,train,eval,verify,aggregate}``.

Exit codes: 0 success, 1 verification or experiment failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .aggregate import AlignmentError, aggregate_runs, write_summary
from .checkpoint import ManifestError
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .equivariance import assert_permutation_equivariant, swap_two
from .gradcheck import run_grad_suite
from .layers import PlainMlp, build_cpe_policy, build_glpe_network, check_size_bound, param_count
from .marl.learner import POLICY_KINDS, TrainConfig, evaluate, train
from .spread import N_ACTIONS, SpreadConfig
from .toy import ToyRunConfig, final_mse, run_toy_experiment, write_rows

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("glpe_marl")


class UsageError(Exception):
    pass


def _csv_list(text: str, cast=str) -> List:
    return [cast(part.strip()) for part in text.split(",") if part.strip()]


def _workers() -> int:
    raw = os.environ.get("GLPE_MARL_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise UsageError(f"GLPE_MARL_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def _prepare_out(out: Path, force: bool) -> None:
    if (out / "manifest.json").exists() and not force:
        raise UsageError(f"{out} already holds a run; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def write_manifest(out: Path, kind: str, config: ExperimentConfig, seeds: Sequence[int], extra: dict | None = None):
    """Record everything needed to rerun before any compute starts."""
    (out / "config.cfg").write_text(dump_config(config))
    manifest = {
        "kind": kind,
        "version": __version__,
        "seeds": list(seeds),
        "out_dir": str(out),
        "config": dump_config(config).splitlines(),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


# -- toy ------------------------------------------------------------------

def cmd_toy(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    toy = config.toy
    overrides = {}
    if args.modes:
        overrides["modes"] = tuple(_csv_list(args.modes))
    if args.agents:
        overrides["agents"] = tuple(_csv_list(args.agents, int))
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.steps_per_epoch is not None:
        overrides["steps_per_epoch"] = args.steps_per_epoch
    toy = dataclasses.replace(toy, **overrides)
    config = dataclasses.replace(config, toy=toy)
    out = Path(args.out)
    _prepare_out(out, args.force)
    write_manifest(out, "toy", config, list(range(toy.seeds)))
    rows = run_toy_experiment(toy, workers=min(_workers(), 8))
    write_rows(out / "toy.csv", rows)
    finals = final_mse(rows, toy.final_window)
    with (out / "toy_final.csv").open("w") as fh:
        fh.write("mode,N,variant,final_mse\n")
        for (mode, n, variant), value in sorted(finals.items()):
            fh.write(f"{mode},{n},{variant},{value!r}\n")
    print(f"{'mode':6} {'N':>3} " + " ".join(f"{v:>13}" for v in toy.variants))
    for mode in toy.modes:
        for n in toy.agents:
            print(f"{mode:6} {n:>3} " + " ".join(f"{finals[(mode, n, v)]:13.5g}" for v in toy.variants))
    return EXIT_OK


# -- train ----------------------------------------------------------------

def _train_job(job):
    train_cfg, env_cfg, policy, mixer, seed, run_dir = job
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    return train(train_cfg, env_cfg, policy, mixer, run_dir, seed=seed)


def cmd_train(args) -> int:
    config = load_config(args.config)
    policies = _csv_list(args.policies) if args.policies else [config.train.policy]
    for p in policies:
        if p not in POLICY_KINDS:
            raise UsageError(f"unknown policy {p!r}; expected one of {POLICY_KINDS}")
    mixer = args.mixer or config.train.mixer
    if mixer not in ("vdn", "qmix"):
        raise UsageError(f"unknown mixer {mixer!r}")
    train_cfg = config.train
    if args.total_steps is not None:
        train_cfg = dataclasses.replace(train_cfg, total_steps=args.total_steps)
    config = dataclasses.replace(config, train=train_cfg)
    seeds = list(range(args.seeds))
    out = Path(args.out)
    _prepare_out(out, args.force)
    write_manifest(out, "train", config, seeds, {"policies": policies, "mixer": mixer})

    jobs = []
    for policy in policies:
        for seed in seeds:
            run_dir = out / f"{policy}-{mixer}" / f"seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            run_cfg = dataclasses.replace(config, train=dataclasses.replace(train_cfg, policy=policy, mixer=mixer))
            write_manifest(run_dir, "train", run_cfg, [seed], {"policy": policy, "mixer": mixer})
            jobs.append((train_cfg, config.env, policy, mixer, seed, run_dir))
    workers = min(_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_train_job, jobs))
    else:
        summaries = [_train_job(j) for j in jobs]

    rows = []
    for policy in policies:
        dirs = [out / f"{policy}-{mixer}" / f"seed{s}" for s in seeds]
        for row in aggregate_runs(dirs):
            rows.append((policy, mixer, *row))
    write_summary(out / "aggregate.csv", rows, extra_header=("policy", "mixer"))
    (out / "summaries.json").write_text(json.dumps(summaries, indent=2, sort_keys=True) + "\n")
    failed = [s for s in summaries if s["status"] != "ok"]
    for s in summaries:
        print(f"{s['policy']:>12}-{s['mixer']} seed {s['seed']}: final return {s['final_mean_test_return']:.3f} "
              f"(random {s['random_baseline_return']:.3f}) [{s['status']}]")
    return EXIT_FAIL if failed else EXIT_OK


# -- eval -----------------------------------------------------------------

def cmd_eval(args) -> int:
    env_cfg = load_config(args.config).env if args.config else SpreadConfig()
    if args.n_agents is not None:
        env_cfg = dataclasses.replace(env_cfg, n_agents=args.n_agents)
    try:
        mean, returns = evaluate(args.checkpoint, env_cfg, args.episodes, seed=args.seed, trace_path=args.trace)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps({"mean_return": mean, "std_return": float(np.std(returns)), "returns": returns}))
    return EXIT_OK


# -- verify ---------------------------------------------------------------

def spread_policy_pair(n_agents: int, train_cfg: TrainConfig | None = None):
    """Centralized GLPE policy for Spread-N and its distributed counterpart."""
    train_cfg = train_cfg or TrainConfig()
    env = SpreadConfig(n_agents=n_agents)
    d_obs = env.obs_dim(train_cfg.agent_id, train_cfg.last_action)
    glpe = build_cpe_policy(d_obs, N_ACTIONS, np.random.default_rng(0), train_cfg.hidden_dim)
    return glpe, glpe.distributed_equivalent()


def cmd_verify(args) -> int:
    ok = True
    rng = np.random.default_rng(args.seed)
    print("== permutation equivariance ==")
    policy = build_cpe_policy(12, N_ACTIONS, rng)
    report = assert_permutation_equivariant(policy, trials=args.trials, tolerance=1e-9, rng=rng)
    print(f"cpe-policy        trials={report.trials:4d} max_dev={report.max_deviation:.3e} "
          f"{'PASS' if report.passed else 'FAIL'}")
    ok &= report.passed
    if args.negative_control:
        mlp = PlainMlp(5, 3, [16], 3, rng)
        neg = assert_permutation_equivariant(mlp, trials=args.trials, tolerance=1e-9, n_agents=(5,), rng=rng,
                                             perm_sampler=swap_two)
        expected_fail = not neg.passed
        print(f"plain-mlp (neg.)  trials={neg.trials:4d} max_dev={neg.max_deviation:.3e} "
              f"{'FAIL-as-designed' if expected_fail else 'UNEXPECTED PASS'}")
        ok &= expected_fail

    print("== gradient checks (central differences, h=1e-6) ==")
    for r in run_grad_suite(instances=args.grad_instances, seed=args.seed):
        print(f"{r.name:22} n={r.instances:3d} max_rel={r.max_rel_error:.2e} max_abs_small={r.max_abs_error_small:.2e} "
              f"{'PASS' if r.passed else 'FAIL'}")
        ok &= r.passed

    print("== parameter counts ==")
    print(f"{'config':12} {'glpe':>8} {'distrib':>8} {'ratio':>6}")
    for n in (3, 4, 5, 8):
        glpe, dist = spread_policy_pair(n)
        ratio = param_count(glpe) / param_count(dist)
        bound = check_size_bound(glpe, dist)
        print(f"{'spread-' + str(n):12} {param_count(glpe):8d} {param_count(dist):8d} {ratio:6.3f} "
              f"{'PASS' if bound else 'FAIL'}")
        ok &= bound
    toy = build_glpe_network(2, 64, 2, 3, rng)
    bound = check_size_bound(toy, toy.distributed_equivalent())
    print(f"{'toy-glpe':12} {param_count(toy):8d} {param_count(toy.distributed_equivalent()):8d} "
          f"{param_count(toy) / param_count(toy.distributed_equivalent()):6.3f} {'PASS' if bound else 'FAIL'}")
    ok &= bound
    print("ALL PASS" if ok else "FAILURES PRESENT")
    return EXIT_OK if ok else EXIT_FAIL


# -- aggregate ------------------------------------------------------------

def cmd_aggregate(args) -> int:
    try:
        rows = aggregate_runs(args.runs)
    except AlignmentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except FileNotFoundError as exc:
        raise UsageError(f"missing metrics file: {exc.filename}") from None
    write_summary(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glpe-marl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", help="toy regression study over pooling/tanh variants")
    p.add_argument("--config")
    p.add_argument("--modes", help="comma list from mean,sum,max,mix")
    p.add_argument("--agents", help="comma list of agent counts")
    p.add_argument("--seeds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("train", help="train policies on Spread over a seed grid")
    p.add_argument("--config", required=True)
    p.add_argument("--policies", help="comma list from distributed,glpe")
    p.add_argument("--mixer", choices=("vdn", "qmix"))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--total-steps", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--n-agents", type=int)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--trace", help="write a CSV trace of the first episode")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="equivariance, gradient and parameter-count checks")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--grad-instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negative-control", action="store_true")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("aggregate", help="seed mean/min/max and quantiles of metrics CSVs",
                       description="Per env_steps row: mean, min, max and 12.5%/87.5% quantiles across runs. "
                                   "Quantiles interpolate linearly between order statistics at position "
                                   "q*(n-1) of the sorted values.")
    p.add_argument("runs", nargs="+", help="run directories or metrics.csv files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aggregate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
