"""Evaluation episodes, degradation tables and the end-to-end experiment suite."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .baselines import Controller, FixedTimeController, PolicyController, WebsterController
from .envs import episode_seed
from .microsim import SimWorld
from .neuralnet import NetworkParams, save_checkpoint
from .ppo import PPOConfig, retrain, train, write_curve
from .topology import ScenarioSpec, catalog_by_id, test_scenarios, training_scenarios

log = logging.getLogger(__name__)

EVAL_FIELDS = ("scenario", "controller", "seed", "episode", "avg_waiting_s")
DEGRADATION_FIELDS = ("scenario", "model", "reference", "model_waiting_s", "reference_waiting_s", "degradation_pct")
DEFAULT_EPISODES = 5
DEFAULT_EVAL_SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class EvalRow:
    scenario: str
    controller: str
    seed: int
    episode: int
    avg_waiting_s: float
    raw_return: float = math.nan


@dataclass
class EvalReport:
    controller: str
    rows: list[EvalRow] = field(default_factory=list)

    def scenarios(self) -> list[str]:
        return sorted({r.scenario for r in self.rows})

    def avg_waiting(self) -> dict[str, float]:
        """Mean over episodes and seeds, per scenario."""
        out = {}
        for sid in self.scenarios():
            out[sid] = float(np.mean([r.avg_waiting_s for r in self.rows if r.scenario == sid]))
        return out

    def mean_return(self) -> dict[str, float]:
        out = {}
        for sid in self.scenarios():
            out[sid] = float(np.mean([r.raw_return for r in self.rows if r.scenario == sid]))
        return out

    @property
    def episodes(self) -> int:
        return len(self.rows)

    @property
    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        return self


def _sort_key(r: EvalRow):
    return (r.scenario, r.controller, r.seed, r.episode)


def _run_episode(controller, scenario: ScenarioSpec, seed: int, episode: int) -> EvalRow:
    if isinstance(controller, PolicyController):
        env = controller.env_for(scenario, seed, episode)
        world = controller.run_env(env)
        raw = env.episode_raw_return
    else:
        world = SimWorld(scenario, seed=episode_seed(scenario.seed, seed, episode), action_set=None)
        controller.run(world)
        raw = math.nan  # decision-level returns only exist for policies
    return EvalRow(scenario.id, controller.name, seed, episode, world.metrics().avg_waiting_s, raw)


def evaluate(
    controller: Union[Controller, PolicyController],
    scenario: ScenarioSpec,
    episodes: int = DEFAULT_EPISODES,
    seeds: Sequence[int] = DEFAULT_EVAL_SEEDS,
    threads: int = 1,
) -> EvalReport:
    """Run ``episodes`` x ``len(seeds)`` deterministic episodes.

    Every controller sees the same traffic for a given (scenario, seed,
    episode). Policies act greedily with their reward normaliser frozen.
    """
    if episodes < 1 or not seeds:
        raise ValueError("need at least one episode and one seed")
    if isinstance(controller, PolicyController):
        controller.env_for(scenario, seeds[0], 0)  # fail fast on mismatched models
    jobs = [(s, e) for s in seeds for e in range(episodes)]
    if threads > 1 and not isinstance(controller, WebsterController):
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(lambda j: _run_episode(controller, scenario, *j), jobs))
    else:
        rows = [_run_episode(controller, scenario, s, e) for s, e in jobs]
    return EvalReport(controller.name, sorted(rows, key=_sort_key))


def evaluate_many(controller, scenarios: Sequence[ScenarioSpec], **kwargs) -> EvalReport:
    report = EvalReport(controller.name)
    for sc in sorted(scenarios, key=lambda s: s.id):
        report.extend(evaluate(controller, sc, **kwargs))
    return report


# ---------------------------------------------------------------------------
# CSV round trips


def write_eval_csv(reports: Sequence[EvalReport], path) -> None:
    rows = sorted((r for rep in reports for r in rep.rows), key=_sort_key)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EVAL_FIELDS)
        for r in rows:
            w.writerow([r.scenario, r.controller, r.seed, r.episode, repr(float(r.avg_waiting_s))])


def read_eval_csv(path) -> list[EvalReport]:
    """Parse an ``eval.csv`` back into one report per controller."""
    by_ctl: dict[str, EvalReport] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != EVAL_FIELDS:
            raise ValueError(f"{path}: expected columns {','.join(EVAL_FIELDS)}")
        for rec in reader:
            row = EvalRow(rec["scenario"], rec["controller"], int(rec["seed"]), int(rec["episode"]),
                          float(rec["avg_waiting_s"]))
            by_ctl.setdefault(row.controller, EvalReport(row.controller)).rows.append(row)
    return [by_ctl[k] for k in sorted(by_ctl)]


# ---------------------------------------------------------------------------
# degradation


@dataclass
class DegradationReport:
    model: str
    reference: str
    model_waiting: dict[str, float]
    reference_waiting: dict[str, float]
    percent: dict[str, Optional[float]]

    @property
    def mean(self) -> Optional[float]:
        vals = [v for v in self.percent.values() if v is not None]
        return float(np.mean(vals)) if vals else None


def _as_means(x) -> dict[str, float]:
    return x.avg_waiting() if isinstance(x, EvalReport) else {k: float(v) for k, v in x.items()}


def degradation(report, reference, model: str = "", reference_name: str = "") -> DegradationReport:
    """Percentage increase of waiting time over a reference, per scenario.

    A zero reference waiting time leaves that entry undefined (``None``).
    """
    got, ref = _as_means(report), _as_means(reference)
    if set(got) != set(ref):
        raise ValueError(f"scenario sets differ: {sorted(got)} vs {sorted(ref)}")
    pct = {}
    for sid in sorted(got):
        pct[sid] = None if ref[sid] == 0 else 100.0 * (got[sid] - ref[sid]) / ref[sid]
    model = model or getattr(report, "controller", "model")
    reference_name = reference_name or getattr(reference, "controller", "reference")
    return DegradationReport(model, reference_name, got, ref, pct)


def _fmt(v: Optional[float]) -> str:
    return "NA" if v is None else repr(float(v))


def write_degradation_csv(reports: Sequence[DegradationReport], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DEGRADATION_FIELDS)
        for d in reports:
            for sid in sorted(d.percent):
                w.writerow([sid, d.model, d.reference, _fmt(d.model_waiting[sid]),
                            _fmt(d.reference_waiting[sid]), _fmt(d.percent[sid])])
            w.writerow(["mean", d.model, d.reference, "", "", _fmt(d.mean)])


def read_degradation_csv(path) -> list[DegradationReport]:
    out: dict[tuple, DegradationReport] = {}
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            key = (rec["model"], rec["reference"])
            d = out.setdefault(key, DegradationReport(rec["model"], rec["reference"], {}, {}, {}))
            if rec["scenario"] == "mean":
                continue
            sid = rec["scenario"]
            d.model_waiting[sid] = float(rec["model_waiting_s"])
            d.reference_waiting[sid] = float(rec["reference_waiting_s"])
            d.percent[sid] = None if rec["degradation_pct"] == "NA" else float(rec["degradation_pct"])
    return list(out.values())


# ---------------------------------------------------------------------------
# model training helpers shared by the suite, the CLI and the acceptance run


def policy_evaluator(scenario: ScenarioSpec, seeds: Sequence[int], episodes: int = 1):
    """Greedy-evaluation callback for :func:`ppo.train` curves."""

    def run(params: NetworkParams) -> dict:
        rep = evaluate(PolicyController(params), scenario, episodes=episodes, seeds=seeds)
        return {
            "eval_reward": float(np.mean([r.raw_return for r in rep.rows])),
            "eval_waiting_s": float(np.mean([r.avg_waiting_s for r in rep.rows])),
        }

    return run


def train_universal(steps: int, seed: int, augment: bool, scenarios=None, episode_s=None, threads=1, curve_path=None):
    scenarios = list(scenarios or training_scenarios())
    cfg = PPOConfig(total_steps=steps, augment=augment, seed=seed, episode_s=episode_s, threads=threads)
    return train(cfg, scenarios, curve_path=curve_path)


def train_reference(scenario: ScenarioSpec, steps: int, seed: int, n_envs: int = 8, episode_s=None,
                    threads=1, curve_path=None, evaluator=None, eval_every=0):
    """Single-environment model: ``n_envs`` copies of one intersection, no augmentation."""
    cfg = PPOConfig(total_steps=steps, augment=False, seed=seed, n_envs=n_envs, episode_s=episode_s, threads=threads)
    return train(cfg, [scenario], curve_path=curve_path, evaluator=evaluator, eval_every=eval_every)


def retrain_reference(result, scenario: ScenarioSpec, steps: int, seed: int, n_envs: int = 8, episode_s=None,
                      threads=1, curve_path=None, evaluator=None, eval_every=0):
    """Warm-start a universal model on one intersection (no augmentation)."""
    cfg = PPOConfig(total_steps=steps, augment=False, seed=seed, n_envs=n_envs, episode_s=episode_s, threads=threads)
    return retrain((result.params, result.opt), scenario, cfg, curve_path=curve_path,
                   evaluator=evaluator, eval_every=eval_every)


# ---------------------------------------------------------------------------
# experiment suite


@dataclass
class SuiteConfig:
    seed: int = 0
    controllers: tuple = ("webster", "fixed", "multi-env", "adlight")
    train_scenarios: tuple = tuple(sc.id for sc in training_scenarios())
    test_scenarios: tuple = tuple(sc.id for sc in test_scenarios())
    train_steps: int = 200_000
    reference_steps: int = 100_000
    retrain_fraction: float = 1 / 6
    curve_points: int = 6
    episodes: int = DEFAULT_EPISODES
    eval_seeds: tuple = DEFAULT_EVAL_SEEDS
    episode_s: Optional[int] = None
    fixed_green_s: int = 30
    threads: int = 1

    @classmethod
    def from_dict(cls, d: Mapping) -> "SuiteConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown suite keys: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SuiteConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


UNIVERSAL = {"adlight": True, "multi-env": False}


def _shorten(sc: ScenarioSpec, episode_s: Optional[int]) -> ScenarioSpec:
    return sc if episode_s is None else replace(sc, duration_s=int(episode_s))


def run_experiment_suite(config: SuiteConfig, out_dir) -> Path:
    """Train, evaluate and tabulate; every output is a function of ``config``.

    Writes ``eval.csv`` (all controllers on both splits), ``degradation.csv``
    (universal models vs single-environment references on the test split),
    ``curve_<run>.csv`` learning curves, checkpoints and ``failures.csv``
    for any cell that could not be produced.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cat = catalog_by_id()
    train_set = [_shorten(cat[s], config.episode_s) for s in config.train_scenarios]
    test_set = [_shorten(cat[s], config.episode_s) for s in config.test_scenarios]
    ev = dict(episodes=config.episodes, seeds=list(config.eval_seeds), threads=config.threads)
    reports: list[EvalReport] = []
    failures: list[tuple[str, str, str]] = []
    models = {}

    def cell(controller, sc):
        try:
            return evaluate(controller, sc, **ev)
        except Exception as exc:  # record and keep going
            log.error("%s on %s failed: %s", controller.name, sc.id, exc)
            failures.append((sc.id, controller.name, f"{type(exc).__name__}: {exc}"))
            return EvalReport(controller.name)

    for name in config.controllers:
        if name in UNIVERSAL:
            res = train_universal(
                config.train_steps, config.seed, UNIVERSAL[name], train_set, threads=config.threads,
                curve_path=out / f"curve_{name}.csv",
            )
            save_checkpoint(res.params, res.opt, out / f"{name}.adl")
            models[name] = res
            ctl = PolicyController(res.params, name=name)
        elif name == "webster":
            ctl = WebsterController()
        elif name == "fixed":
            ctl = FixedTimeController(config.fixed_green_s)
            ctl.name = f"fixed{config.fixed_green_s}"
        else:
            failures.append(("*", name, "unknown controller"))
            continue
        rep = EvalReport(ctl.name)
        for sc in sorted(train_set + test_set, key=lambda s: s.id):
            rep.extend(cell(ctl, sc))
        reports.append(rep)

    # single-environment references, retraining and the flat no-retrain line
    deg_reports = []
    if test_set and config.reference_steps > 0:
        ref_report = EvalReport("single-env")
        retrain_steps = int(config.reference_steps * config.retrain_fraction)
        universal = models.get("adlight")
        for sc in test_set:
            every = max(1, config.reference_steps // max(1, config.curve_points))
            evaluator = policy_evaluator(sc, list(config.eval_seeds))
            try:
                ref = train_reference(
                    sc, config.reference_steps, config.seed, episode_s=None, threads=config.threads,
                    curve_path=out / f"curve_scratch_{sc.id}.csv", evaluator=evaluator, eval_every=every,
                )
                save_checkpoint(ref.params, ref.opt, out / f"single-env_{sc.id}.adl")
                ref_report.extend(cell(PolicyController(ref.params, name="single-env"), sc))
            except Exception as exc:
                failures.append((sc.id, "single-env", f"{type(exc).__name__}: {exc}"))
                continue
            if universal is not None:
                rt_every = max(1, retrain_steps // max(1, config.curve_points))
                rt = retrain_reference(
                    universal, sc, retrain_steps, config.seed, threads=config.threads,
                    curve_path=out / f"curve_retrain_{sc.id}.csv", evaluator=evaluator, eval_every=rt_every,
                )
                ref_report_rt = cell(PolicyController(rt.params, name="retrained"), sc)
                reports.append(ref_report_rt)
                flat = evaluator(universal.params)
                write_curve(
                    [{"iteration": 0, "env_steps": s, "episodes": 0, **flat}
                     for s in range(0, config.reference_steps + 1, every)],
                    out / f"curve_noretrain_{sc.id}.csv",
                )
        reports.append(ref_report)
        ref_means = ref_report.avg_waiting()
        for rep in reports:
            if rep.controller in UNIVERSAL:
                got = {k: v for k, v in rep.avg_waiting().items() if k in ref_means}
                if set(got) == set(ref_means) and got:
                    deg_reports.append(degradation(got, ref_means, rep.controller, "single-env"))
    write_eval_csv(reports, out / "eval.csv")
    write_degradation_csv(deg_reports, out / "degradation.csv")
    with open(out / "failures.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("scenario", "controller", "error"))
        w.writerows(sorted(failures))
    with open(out / "suite.json", "w") as f:
        json.dump(asdict(config), f, indent=2, sort_keys=True)
        f.write("\n")
    return out
