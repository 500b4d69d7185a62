"""Comparison controllers: fixed-time, adaptive Webster, and RL action variants."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .envs import ChooseNextEnv, DurationEnv, NextOrNotEnv
from .microsim import SATURATION_HEADWAY_S, SimWorld
from .neuralnet import NetworkParams, forward
from .topology import IntersectionSpec

log = logging.getLogger(__name__)

SATURATION_FLOW_VPH = 3600.0 / SATURATION_HEADWAY_S  # 1800 veh/h/lane
MAX_CYCLE_S = 180.0
SATURATED_Y = 0.95
DEFAULT_GREEN_S = 30
DEFAULT_SMOOTHING = 0.3


@dataclass
class WebsterPlan:
    cycle_s: float
    green_splits: list[float]
    lost_time_s: float
    saturated: bool = False
    flow_ratios: list[float] = field(default_factory=list)


def _split_greens(total: float, weights: np.ndarray, floor: float) -> np.ndarray:
    """Share ``total`` in proportion to ``weights`` with every share >= ``floor``."""
    n = len(weights)
    greens = np.full(n, floor, dtype=np.float64)
    free = np.ones(n, dtype=bool)
    while True:
        remaining = total - floor * (~free).sum()
        w = np.where(free, weights, 0.0)
        if not free.any():
            break
        if w.sum() <= 0:
            greens[free] = remaining / free.sum()
            break
        share = remaining * w / w.sum()
        low = free & (share < floor)
        if not low.any():
            greens[free] = share[free]
            break
        free &= ~low
    return greens


def webster_plan(volumes_vph: Sequence[float], spec: IntersectionSpec) -> WebsterPlan:
    """Cycle length and green split from per-movement hourly volumes."""
    vol = np.asarray(volumes_vph, dtype=np.float64)
    if vol.shape != (8,) or (vol < 0).any():
        raise ValueError("volumes must be 8 nonnegative numbers")
    lanes = spec.lane_counts.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lanes > 0, vol / (SATURATION_FLOW_VPH * lanes), 0.0)
    y = np.array([max(ratio[list(p.movement_indices)]) for p in spec.phases])
    Y = float(y.sum())
    n = spec.n_phases
    L = n * spec.yellow_s
    c_min = n * spec.min_green_s + L
    saturated = Y >= SATURATED_Y
    if saturated:
        cycle = MAX_CYCLE_S
    else:
        cycle = (1.5 * L + 5.0) / (1.0 - Y)
        cycle = min(max(cycle, c_min), MAX_CYCLE_S)
    greens = _split_greens(cycle - L, y, spec.min_green_s)
    return WebsterPlan(cycle, greens.tolist(), L, saturated, y.tolist())


def integer_greens(greens: Sequence[float]) -> list[int]:
    """Round to whole seconds keeping the total (largest remainder)."""
    g = np.asarray(greens, dtype=np.float64)
    base = np.floor(g).astype(int)
    short = int(round(g.sum())) - base.sum()
    order = np.argsort(-(g - base), kind="stable")
    base[order[:short]] += 1
    return base.tolist()


class Controller:
    """Drives a :class:`SimWorld` until the episode ends."""

    name = "controller"

    def run(self, world: SimWorld) -> None:
        raise NotImplementedError


class FixedTimeController(Controller):
    name = "fixed"

    def __init__(self, green_s: int | Sequence[int] = DEFAULT_GREEN_S):
        self.green_s = green_s

    def greens(self, n: int) -> list[int]:
        if isinstance(self.green_s, (int, np.integer)):
            return [int(self.green_s)] * n
        return [int(g) for g in self.green_s]

    def run(self, world: SimWorld) -> None:
        greens = self.greens(world.n_phases)
        world.hold(greens[world.phase_index])
        world.run_phase()
        while not world.finished:
            world.begin_phase(greens[(world.phase_index + 1) % world.n_phases])
            world.run_phase()


class WebsterController(Controller):
    """Recompute the Webster plan at every cycle boundary from loop counts.

    The first cycle runs ``default_green_s`` on every phase. Hourly volumes
    are an exponential average of per-cycle stop-line counts; ``smoothing``
    is the weight of the newest cycle (1.0 uses the last cycle alone).
    """

    name = "webster"

    def __init__(self, default_green_s: int = DEFAULT_GREEN_S, smoothing: float = DEFAULT_SMOOTHING):
        if not 0 < smoothing <= 1:
            raise ValueError("smoothing must lie in (0, 1]")
        self.default_green_s = default_green_s
        self.smoothing = smoothing
        self.plans: list[WebsterPlan] = []
        self.cycles: list[float] = []
        self.volume_vph: Optional[np.ndarray] = None
        self.cycle_start_s = 0

    def observe_cycle(self, world: SimWorld, t0: int, t1: int) -> WebsterPlan:
        """Fold the counts of ``[t0, t1)`` into the volume estimate and plan."""
        span = max(1, t1 - t0)
        vph = world.crossings[t0:t1].sum(axis=0) * 3600.0 / span
        if self.volume_vph is None:
            self.volume_vph = vph
        else:
            self.volume_vph = self.smoothing * vph + (1 - self.smoothing) * self.volume_vph
        plan = webster_plan(self.volume_vph, world.spec)
        self.plans.append(plan)
        self.cycles.append(plan.cycle_s)
        return plan

    def run(self, world: SimWorld) -> None:
        n = world.n_phases
        greens = [self.default_green_s] * n
        self.plans, self.cycles, self.volume_vph = [], [], None
        first = True
        while not world.finished:
            self.cycle_start_s = world.clock_s
            for k in range(n):
                if world.finished:
                    break
                if first:
                    world.hold(greens[0])
                    first = False
                else:
                    world.begin_phase(greens[k])
                world.run_phase()
            if world.finished:
                break
            plan = webster_adaptive_step(self, world)
            greens = [max(1, g) for g in integer_greens(plan.green_splits)]


def webster_adaptive_step(controller: WebsterController, world: SimWorld) -> WebsterPlan:
    """Plan for the next cycle, given the cycle that just ended at ``world.clock_s``."""
    return controller.observe_cycle(world, controller.cycle_start_s, world.clock_s)


class PolicyController(Controller):
    """Runs a trained network through one of the decision environments.

    ``scenario_id`` pins per-intersection models (choose-next, next-or-not)
    to the intersection they were trained on.
    """

    def __init__(self, params: NetworkParams, kind: str = "duration", scenario_id: Optional[str] = None,
                 name: Optional[str] = None):
        self.params = params
        self.kind = kind
        self.scenario_id = scenario_id
        self.name = name or kind

    def env_for(self, scenario, seed: int, episode: int):
        cls = {"duration": DurationEnv, "choose-next": ChooseNextEnv, "next-or-not": NextOrNotEnv}[self.kind]
        if self.scenario_id is not None and scenario.id != self.scenario_id:
            raise ValueError(
                f"{self.name} model was trained for {self.scenario_id} and cannot control {scenario.id}"
            )
        env = cls(scenario, seed=seed)
        if env.n_actions != self.params.n_actions:
            raise ValueError(f"{self.name} model has {self.params.n_actions} actions, {scenario.id} needs {env.n_actions}")
        env.normalizer.frozen = True
        env.episode = episode
        return env

    def act(self, state: np.ndarray) -> int:
        logits, _, _ = forward(self.params, state)
        return int(np.argmax(logits))

    def run_env(self, env) -> SimWorld:
        s = env.reset()
        done = False
        while not done:
            s, _, done, _ = env.step(self.act(s))
        return env.world


def choose_next_phase_step(params: NetworkParams, env: ChooseNextEnv, state: np.ndarray):
    """One 5 s decision of the choose-next-phase agent (greedy)."""
    logits, _, _ = forward(params, state)
    return env.step(int(np.argmax(logits)))


def next_or_not_step(params: NetworkParams, env: NextOrNotEnv, state: np.ndarray):
    """One 5 s keep/advance decision (greedy)."""
    logits, _, _ = forward(params, state)
    return env.step(int(np.argmax(logits)))
