"""``adlight`` command line: catalog, simulate, train, retrain, evaluate, baseline, report."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .baselines import FixedTimeController, PolicyController, WebsterController
from .envs import ENV_TYPES
from .harness import (
    DEFAULT_EPISODES,
    SuiteConfig,
    degradation,
    evaluate_many,
    read_eval_csv,
    run_experiment_suite,
    write_degradation_csv,
    write_eval_csv,
)
from .microsim import SimWorld
from .neuralnet import load_checkpoint
from .ppo import PPOConfig, retrain, save, train
from .topology import (
    builtin_catalog,
    catalog_by_id,
    catalog_table,
    dump_scenario,
    load_scenario,
    test_scenarios,
    training_scenarios,
)

log = logging.getLogger("adlight")


class CliError(Exception):
    pass


def resolve_scenarios(items):
    """Paths to scenario JSON, catalog ids, or the split names ``train``/``test``/``all``."""
    cat = catalog_by_id()
    out = []
    for item in items:
        if item == "train":
            out.extend(training_scenarios())
        elif item == "test":
            out.extend(test_scenarios())
        elif item == "all":
            out.extend(builtin_catalog())
        elif item in cat:
            out.append(cat[item])
        elif os.path.exists(item):
            out.append(load_scenario(item))
        else:
            raise CliError(f"unknown scenario {item!r} (not a file, catalog id or split name)")
    if not out:
        raise CliError("no scenarios given")
    return out


def _with_duration(scenarios, duration_s):
    if duration_s is None:
        return scenarios
    from dataclasses import replace

    return [replace(sc, duration_s=int(duration_s)) for sc in scenarios]


def parse_plan(text: str):
    kind, _, arg = text.partition(":")
    if kind == "fixed":
        greens = [int(x) for x in arg.split(",")] if arg else [30]
        return FixedTimeController(greens[0] if len(greens) == 1 else greens)
    if kind == "webster":
        return WebsterController()
    raise CliError(f"unknown plan {text!r}; use fixed:<seconds>[,<seconds>...] or webster")


def out_path(args, name: str) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def cmd_catalog(args) -> None:
    print(catalog_table())
    if args.write:
        d = Path(args.write)
        d.mkdir(parents=True, exist_ok=True)
        for sc in builtin_catalog():
            (d / f"{sc.id}.json").write_text(dump_scenario(sc))


def cmd_simulate(args) -> None:
    (sc,) = _with_duration(resolve_scenarios([args.scenario]), args.duration)
    ctl = parse_plan(args.plan)
    world = SimWorld(sc, seed=args.seed if args.sim_seed is None else args.sim_seed, action_set=None)
    ctl.run(world)
    if args.trace:
        world.write_trace(args.trace)
    m = world.metrics()
    print(json.dumps({"scenario": sc.id, "controller": ctl.name, "avg_waiting_s": m.avg_waiting_s,
                      "vehicles": m.vehicles, "throughput": m.throughput}))


def _ppo_config(args, **over) -> PPOConfig:
    return PPOConfig(
        total_steps=args.steps, augment=args.augment, seed=args.seed, n_envs=args.n_envs,
        episode_s=args.episode_s, threads=args.threads, lr=args.lr, **over,
    )


def cmd_train(args) -> None:
    scenarios = resolve_scenarios(args.scenarios)
    env_cls = ENV_TYPES[args.action]
    if args.action != "duration" and len({sc.intersection.n_phases for sc in scenarios}) > 1:
        raise CliError(f"{args.action} agents are per-intersection; give scenarios with one phase count")
    res = train(_ppo_config(args), scenarios, env_cls=env_cls, curve_path=out_path(args, f"curve_{args.run}.csv"))
    out = args.out or str(out_path(args, f"{args.run}.adl"))
    save(res, out)
    print(json.dumps({"checkpoint": out, "env_steps": res.env_steps, "iterations": len(res.curve)}))


def cmd_retrain(args) -> None:
    (sc,) = resolve_scenarios([args.scenario])
    res = retrain(args.checkpoint, sc, _ppo_config(args), curve_path=out_path(args, f"curve_{args.run}.csv"))
    out = args.out or str(out_path(args, f"{args.run}.adl"))
    save(res, out)
    print(json.dumps({"checkpoint": out, "env_steps": res.env_steps}))


def _write_reports(args, reports) -> None:
    path = out_path(args, "eval.csv")
    write_eval_csv(reports, path)
    for rep in reports:
        for sid, w in rep.avg_waiting().items():
            print(json.dumps({"scenario": sid, "controller": rep.controller, "avg_waiting_s": w}))


def _eval_kwargs(args):
    return dict(episodes=args.episodes, seeds=args.eval_seeds or [args.seed], threads=args.threads)


def cmd_evaluate(args) -> None:
    scenarios = _with_duration(resolve_scenarios(args.scenarios), args.duration)
    params, _ = load_checkpoint(args.checkpoint)
    ctl = PolicyController(params, kind=args.action, scenario_id=args.pin, name=args.name)
    _write_reports(args, [evaluate_many(ctl, scenarios, **_eval_kwargs(args))])


def cmd_baseline(args) -> None:
    scenarios = _with_duration(resolve_scenarios([args.scenario]), args.duration)
    sc = scenarios[0]
    if args.method == "webster":
        ctl = WebsterController()
    elif args.method == "fixed":
        ctl = FixedTimeController(args.green)
        ctl.name = f"fixed{args.green}"
    else:
        # the RL action variants are per-intersection models trained here first
        cfg = PPOConfig(total_steps=args.steps, augment=False, seed=args.seed, n_envs=args.n_envs or 8,
                        threads=args.threads)
        res = train(cfg, [sc], env_cls=ENV_TYPES[args.method],
                    curve_path=out_path(args, f"curve_{args.method}_{sc.id}.csv"))
        save(res, out_path(args, f"{args.method}_{sc.id}.adl"))
        ctl = PolicyController(res.params, kind=args.method, scenario_id=sc.id, name=args.method)
    _write_reports(args, [evaluate_many(ctl, scenarios, **_eval_kwargs(args))])


def cmd_report(args) -> None:
    if args.config:
        cfg = SuiteConfig.load(args.config)
        over = {"seed": args.seed, "threads": args.threads}
        cfg = SuiteConfig.from_dict({**cfg.__dict__, **over})
        out = run_experiment_suite(cfg, args.out_dir)
        print(json.dumps({"suite": str(out)}))
        return
    if not (args.eval and args.model and args.reference):
        raise CliError("report needs --config, or --eval with --model and --reference")
    reports = {r.controller: r for r in read_eval_csv(args.eval)}
    for name in (args.model, args.reference):
        if name not in reports:
            raise CliError(f"controller {name!r} not found in {args.eval}")
    d = degradation(reports[args.model], reports[args.reference])
    write_degradation_csv([d], out_path(args, "degradation.csv"))
    print(json.dumps({"model": d.model, "reference": d.reference, "mean_degradation_pct": d.mean,
                      "per_scenario": d.percent}))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out-dir", default=".", help="directory for CSV and checkpoint outputs")
    common.add_argument("--threads", type=int, default=1, help="worker threads for env stepping")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="adlight", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("catalog", parents=[common], help="print the built-in intersections")
    s.add_argument("--write", metavar="DIR", help="also write one scenario JSON per intersection")
    s.set_defaults(func=cmd_catalog)

    s = sub.add_parser("simulate", parents=[common], help="run one episode under a classical plan")
    s.add_argument("--scenario", required=True)
    s.add_argument("--plan", default="fixed:30", help="fixed:<s>[,<s>...] or webster")
    s.add_argument("--trace", help="per-second trace CSV")
    s.add_argument("--duration", type=int)
    s.add_argument("--sim-seed", type=int, help="traffic seed (default: --seed)")
    s.set_defaults(func=cmd_simulate)

    def training_args(s, steps):
        s.add_argument("--steps", type=int, default=steps)
        s.add_argument("--augment", action=argparse.BooleanOptionalAction, default=True)
        s.add_argument("--n-envs", type=int)
        s.add_argument("--episode-s", type=int)
        s.add_argument("--lr", type=float, default=3e-4)
        s.add_argument("--out", help="checkpoint path (default <out-dir>/<run>.adl)")

    s = sub.add_parser("train", parents=[common], help="train a model with PPO")
    s.add_argument("--scenarios", nargs="+", default=["train"])
    s.add_argument("--action", choices=sorted(ENV_TYPES), default="duration")
    s.add_argument("--run", default="train", help="run name used in curve_<run>.csv")
    training_args(s, 200_000)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("retrain", parents=[common], help="continue a checkpoint on one intersection")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scenario", required=True)
    s.add_argument("--run", default="retrain")
    training_args(s, 20_000)
    s.set_defaults(func=cmd_retrain, augment=False)

    def eval_args(s):
        s.add_argument("--episodes", type=int, default=DEFAULT_EPISODES)
        s.add_argument("--eval-seeds", type=int, nargs="+", help="evaluation seeds (default: --seed)")
        s.add_argument("--duration", type=int)

    s = sub.add_parser("evaluate", parents=[common], help="greedy evaluation of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scenarios", nargs="+", default=["all"])
    s.add_argument("--action", choices=sorted(ENV_TYPES), default="duration")
    s.add_argument("--pin", help="scenario id a per-intersection model was trained for")
    s.add_argument("--name", default="adlight", help="controller name in eval.csv")
    eval_args(s)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("baseline", parents=[common], help="evaluate a comparison controller")
    s.add_argument("--method", required=True, choices=["webster", "fixed", "choose-next", "next-or-not"])
    s.add_argument("--scenario", required=True)
    s.add_argument("--green", type=int, default=30, help="fixed-time green seconds")
    s.add_argument("--steps", type=int, default=100_000, help="training steps for RL variants")
    s.add_argument("--n-envs", type=int)
    eval_args(s)
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("report", parents=[common], help="run a suite or tabulate degradation")
    s.add_argument("--config", help="suite JSON; runs the whole experiment suite")
    s.add_argument("--eval", help="eval.csv to tabulate")
    s.add_argument("--model")
    s.add_argument("--reference")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (KeyboardInterrupt, BrokenPipeError):
        return 130
    except Exception as exc:
        if args.verbose:
            log.exception("command failed")
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print("ERROR " + json.dumps(err), file=sys.stderr)
        return 2 if isinstance(exc, (CliError, ValueError)) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
