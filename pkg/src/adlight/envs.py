"""Decision-level environments wrapping :class:`SimWorld` for RL agents.

All three action designs share the movement state and the normalised queue
reward; they differ only in what an action does to the signal:

* ``DurationEnv``   set current phase duration (cyclic, 12 durations)
* ``ChooseNextEnv`` choose any phase every 5 s (acyclic)
* ``NextOrNotEnv``  keep the current phase or advance to the next every 5 s
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from .features import MIN_WINDOW_S, RewardNormalizer, assemble_state, raw_reward
from .microsim import DURATIONS_S, SimWorld
from .topology import ScenarioSpec

DECISION_INTERVAL_S = 5


def episode_seed(scenario_seed: int, seed: int, episode: int) -> int:
    ss = np.random.SeedSequence([int(scenario_seed) & 0xFFFFFFFF, int(seed) & 0xFFFFFFFF, int(episode)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class IntersectionEnv:
    """Base class: episode bookkeeping, observation window and reward."""

    n_actions: int = 0
    action_set = None

    def __init__(
        self,
        scenario: ScenarioSpec,
        seed: int = 0,
        normalizer: Optional[RewardNormalizer] = None,
        duration_s: Optional[int] = None,
    ):
        if duration_s is not None and duration_s != scenario.duration_s:
            from dataclasses import replace

            scenario = replace(scenario, duration_s=int(duration_s))
        self.scenario = scenario
        self.seed = seed
        self.normalizer = normalizer if normalizer is not None else RewardNormalizer()
        self.episode = 0
        self.world: Optional[SimWorld] = None
        self.state: Optional[np.ndarray] = None
        self.episode_raw_return = 0.0
        self.episode_decisions = 0
        self._last_decision_s = 0

    @property
    def id(self) -> str:
        return self.scenario.id

    def reset(self) -> np.ndarray:
        seed = episode_seed(self.scenario.seed, self.seed, self.episode)
        self.world = SimWorld(self.scenario, seed=seed, action_set=self.action_set)
        self.episode_raw_return = 0.0
        self.episode_decisions = 0
        self._last_decision_s = 0
        self._on_reset()
        self.state = self.observe()
        return self.state

    def _on_reset(self) -> None:
        pass

    def observe(self) -> np.ndarray:
        w = self.world
        window = max(MIN_WINDOW_S, w.clock_s - self._last_decision_s)
        self._last_decision_s = w.clock_s
        return assemble_state(w, window)

    def _apply(self, action: int) -> None:
        raise NotImplementedError

    def step(self, action: int):
        """Apply ``action``; returns ``(state, reward, done, info)``.

        The episode counter advances on ``done``; call :meth:`reset` to start
        the next one.
        """
        if not 0 <= int(action) < self.n_actions:
            raise ValueError(f"action {action} outside 0..{self.n_actions - 1}")
        self._apply(int(action))
        raw = raw_reward(self.world)
        self.episode_raw_return += raw
        self.episode_decisions += 1
        reward = self.normalizer.normalize(raw)
        done = self.world.finished
        info = {"raw_reward": raw}
        if done:
            info["episode_raw_return"] = self.episode_raw_return
            info["episode_decisions"] = self.episode_decisions
            info["metrics"] = self.world.metrics()
            self.episode += 1
        self.state = self.observe()
        return self.state, reward, done, info


class DurationEnv(IntersectionEnv):
    """Observe as each phase turns green, then choose how long it stays green.

    After the chosen green the next phase in cyclic order starts (with its
    yellow interlude), and the following decision is made when it is green.
    """

    n_actions = len(DURATIONS_S)
    action_set = DURATIONS_S

    def _apply(self, action: int) -> None:
        w = self.world
        w.hold(DURATIONS_S[action])
        w.run_phase()
        if not w.finished:
            w.switch_to((w.phase_index + 1) % w.n_phases)
            w.run_phase()


class ChooseNextEnv(IntersectionEnv):
    """Every 5 s pick any phase; a different phase costs a yellow interlude."""

    def __init__(self, scenario: ScenarioSpec, *args, **kwargs):
        super().__init__(scenario, *args, **kwargs)
        self.n_actions = scenario.intersection.n_phases

    def _apply(self, action: int) -> None:
        w = self.world
        if action != w.phase_index:
            w.switch_to(action)
            w.run_phase()
            if w.finished:
                return
        w.hold(DECISION_INTERVAL_S)
        w.run_phase()


class NextOrNotEnv(IntersectionEnv):
    """Every 5 s keep (0) or advance (1); advancing needs min green served."""

    n_actions = 2

    def _on_reset(self) -> None:
        self._green_since = 0

    def _apply(self, action: int) -> None:
        w = self.world
        served = w.clock_s - self._green_since
        if action == 1 and served >= w.spec.min_green_s:
            w.switch_to((w.phase_index + 1) % w.n_phases)
            w.run_phase()
            self._green_since = w.clock_s
            if w.finished:
                return
        w.hold(DECISION_INTERVAL_S)
        w.run_phase()


ENV_TYPES = {
    "duration": DurationEnv,
    "choose-next": ChooseNextEnv,
    "next-or-not": NextOrNotEnv,
}
