"""Command line entry points.  Exit codes: 0 ok, 2 invalid config, 3 divergence."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .harness import (
    RESULT_FIELDS,
    ConfigError,
    ExperimentConfig,
    RunDiverged,
    load_checkpoint,
    oracle_headline,
    oracle_table,
    read_results,
    result_rows,
    run_experiment,
    select_and_evaluate,
    set_threads,
    stream,
    write_csv,
)
from .oracles import mann_whitney_u
from .policy import ModelPolicy
from .selection import CombinedPolicy, evaluate

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
SWEEP_SEEDS = (1, 2, 3, 4, 5)


def _add_config_flags(p, treatment=None):
    p.add_argument("--config", help="JSON experiment config; flags below override it")
    if treatment is None:
        p.add_argument("--treatment")
    p.add_argument("--domain")
    p.add_argument("--mu1", type=float)
    p.add_argument("--arms", type=int)
    p.add_argument("--pulls", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--episodes", type=int)
    p.add_argument("--updates", type=int, help="total training updates")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--eval-envs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def config_from_args(args, treatment=None) -> ExperimentConfig:
    d = ExperimentConfig.load(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    treatment = treatment or getattr(args, "treatment", None)
    if treatment:
        d["treatment"] = treatment
    for key in ("domain", "seed", "out"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.domain is not None and not args.config:
        d["domain_params"] = {}
    dp = dict(d["domain_params"])
    for flag, key in (("mu1", "mu1"), ("arms", "arms"), ("pulls", "pulls"), ("rho", "rho"), ("episodes", "episodes")):
        if getattr(args, flag) is not None:
            dp[key] = getattr(args, flag)
    d["domain_params"] = dp
    tr = dict(d["train"])
    for flag, key in (("updates", "total_updates"), ("batch_size", "batch_size"), ("lr", "lr")):
        if getattr(args, flag) is not None:
            tr[key] = getattr(args, flag)
    d["train"] = tr
    mo = dict(d["model"])
    for key in ("hidden", "layers"):
        if getattr(args, key) is not None:
            mo[key] = getattr(args, key)
    d["model"] = mo
    if args.eval_envs is not None:
        d["eval_envs"] = args.eval_envs
    return ExperimentConfig.from_dict(d)


def _print_manifest(m):
    keys = ("run_id", "status", "mean_cumulative_reward", "k_star", "oracle_bound")
    print(json.dumps({k: m[k] for k in keys if k in m}, sort_keys=True))


def cmd_run(args, treatment=None):
    cfg = config_from_args(args, treatment)
    m = run_experiment(cfg)
    _print_manifest(m)
    if cfg.treatment == "oracle":
        for name, value, est, ok in oracle_table_from_manifest(m):
            print(f"{name:28s} closed form {value:.6f}  mc {est:.6f}  {'pass' if ok else 'FAIL'}")
        if "oracle_bound" in m:
            print(f"optimal bound {m['oracle_bound']:.2f}")
    return 0


def oracle_table_from_manifest(m):
    out = Path(m["config"]["out"]) / "oracle.csv"
    if not out.exists():
        return []
    return [(r["name"], float(r["closed_form"]), float(r["mc_estimate"]), r["passed"] == "True") for r in read_results(out)]


def cmd_oracle(args):
    cfg = config_from_args(args, "oracle")
    domain = cfg.make_domain()
    for name, value, est, ok in oracle_table(cfg, domain, n_samples=args.samples):
        print(f"{name:28s} closed form {value:.6f}  mc {est:.6f}  {'pass' if ok else 'FAIL'}")
    bound = oracle_headline(cfg, domain)
    if np.isfinite(bound):
        print(f"optimal bound {bound:.2f}")
    return 0


def _checkpoint_run(args, cfg):
    domain = cfg.make_domain()
    model = load_checkpoint(args.checkpoint)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return domain, model, out


def cmd_select_k(args):
    cfg = config_from_args(args, "first_explore")
    domain, model, out = _checkpoint_run(args, cfg)
    sel, ev = select_and_evaluate(cfg, domain, model, out)
    print(f"k* = {sel.k_star}  curve max {sel.curve.max():.4f}  eval mean {ev.mean:.4f}")
    return 0


def cmd_eval(args):
    cfg = config_from_args(args, "first_explore")
    domain, model, out = _checkpoint_run(args, cfg)
    policy = CombinedPolicy(ModelPolicy(model, "explore", greedy=True), ModelPolicy(model, "exploit", greedy=True), args.k)
    ev = evaluate(policy, domain, cfg.n_eval_envs, stream(cfg.seed, "eval"))
    rows = result_rows(cfg, ev.episode_means, cfg.n_eval_envs)
    write_csv(out / "results.csv", RESULT_FIELDS, [list(asdict(r).values()) for r in rows])
    print(f"k = {args.k}  mean {ev.mean:.4f}  std {ev.std:.4f}")
    return 0


def cmd_baseline(args):
    treatment = {"cumulative": "cumulative_control"}.get(args.algo, args.algo)
    return cmd_run(args, treatment)


def _sample_values(spec):
    path = Path(spec)
    if path.is_dir():
        path = path / "results.csv"
    if path.exists():
        rows = read_results(path)
        return [float(rows[-1]["mean_cumulative_reward"])]
    return [float(x) for x in spec.split(",") if x.strip()]


def cmd_stats(args):
    a = [v for s in args.a for v in _sample_values(s)]
    b = [v for s in args.b for v in _sample_values(s)]
    u, p = mann_whitney_u(a, b)
    print(f"U = {u:g}  two-sided p = {p:.6g}  (n_a={len(a)}, n_b={len(b)})")
    return 0


def cmd_sweep(args):
    base = config_from_args(args)
    rows = []
    for seed in SWEEP_SEEDS:
        d = base.to_dict()
        d["seed"] = seed
        d["out"] = str(Path(base.out) / f"seed_{seed}")
        m = run_experiment(ExperimentConfig.from_dict(d))
        rows.append([seed, m["run_id"], m.get("mean_cumulative_reward", float("nan")), m.get("k_star", "")])
        _print_manifest(m)
    write_csv(Path(base.out) / "sweep.csv", ["seed", "run_id", "mean_cumulative_reward", "k_star"], rows)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="first-explore", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment from a config and/or flags")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="train First-Explore, select k and evaluate")
    _add_config_flags(p, "first_explore")
    p.set_defaults(func=lambda a: cmd_run(a, "first_explore"))

    p = sub.add_parser("select-k", help="sweep k for a saved checkpoint")
    _add_config_flags(p, "first_explore")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_select_k)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint at a fixed k")
    _add_config_flags(p, "first_explore")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="run a reference agent")
    _add_config_flags(p, "baseline")
    p.add_argument("--algo", choices=("ucb1", "ts", "random", "cumulative"), required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("oracle", help="closed-form values against Monte-Carlo estimates")
    _add_config_flags(p, "oracle")
    p.add_argument("--samples", type=int, default=1_000_000)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("stats", help="two-sided Mann-Whitney U test")
    p.add_argument("--a", nargs="+", required=True, help="comma lists, results.csv files or run dirs")
    p.add_argument("--b", nargs="+", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("sweep", help="run a config for seeds 1..5")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    set_threads()
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
