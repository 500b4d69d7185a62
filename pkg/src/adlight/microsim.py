"""Discrete-time point-queue simulation of a single signalised intersection.

Vehicles enter each approach 300 m upstream, travel at free speed, stop
behind the vehicle ahead (7.5 m jam spacing) or at a closed stop line, and
leave through a green stop line at one vehicle per lane every 2 s. Time
advances in 1 s ticks; the heavy loop lives in :mod:`adlight._kernels`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from ._kernels import advance_lanes
from .topology import MOVEMENT_NAMES, N_MOVEMENTS, ScenarioSpec

FREE_SPEED_MPS = 13.89
VEHICLE_LENGTH_M = 5.0
JAM_GAP_M = 2.5
JAM_SPACING_M = VEHICLE_LENGTH_M + JAM_GAP_M
SATURATION_HEADWAY_S = 2.0
APPROACH_LENGTH_M = 300.0
STOP_SPEED_MPS = 0.1

# durations the agent may assign to a phase (one per policy logit)
DURATIONS_S = (5, 10, 15, 20, 25, 30, 35, 40, 45, 50, 55, 60)

RED, YELLOW, GREEN = 0, 1, 2
COLOR_NAMES = ("r", "y", "G")


class SimulationError(RuntimeError):
    pass


class SimulationFinished(SimulationError):
    """Stepping past the scenario duration."""


@dataclass
class Vehicle:
    id: int
    movement: int
    lane: int
    position_m: float
    speed_mps: float
    waiting_s: float
    spawned_at_s: int
    departed_at_s: Optional[int] = None


@dataclass(frozen=True)
class RawObservation:
    flow: float
    occ_mean: float
    occ_max: float
    queue: int


@dataclass(frozen=True)
class EpisodeMetrics:
    avg_waiting_s: float
    vehicles: int
    throughput: int


@dataclass(frozen=True)
class StepReport:
    clock_s: int
    spawned: int
    departed: int
    in_network: int


def sample_arrivals(scenario: ScenarioSpec, seed: Optional[int] = None) -> np.ndarray:
    """Pre-sample per-second, per-lane arrival counts for a whole episode.

    A movement's Poisson stream split uniformly over its lanes is again
    Poisson on each lane, so lanes are sampled independently.
    """
    seed = scenario.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    lane_mov = lane_layout(scenario)
    lanes = scenario.intersection.lane_counts
    rates = np.asarray(scenario.arrival_rates, dtype=np.float64)
    t = np.arange(scenario.duration_s, dtype=np.float64)
    if scenario.demand_profile is not None:
        rates = rates[None, :] * scenario.demand_profile.scales_at(t)
    else:
        rates = np.broadcast_to(rates, (len(t), N_MOVEMENTS))
    lam = rates[:, lane_mov] / lanes[lane_mov]
    return rng.poisson(lam).astype(np.int64)


def lane_layout(scenario_or_spec) -> np.ndarray:
    """Movement index of every simulated lane, movement-major."""
    spec = getattr(scenario_or_spec, "intersection", scenario_or_spec)
    return np.repeat(np.arange(N_MOVEMENTS), spec.lane_counts).astype(np.int64)


class SimWorld:
    """Mutable simulation state for one intersection episode.

    ``action_set`` restricts the durations accepted by :meth:`begin_phase`
    and :meth:`hold`; ``None`` accepts any positive whole number of seconds.
    """

    def __init__(
        self,
        scenario: ScenarioSpec,
        seed: Optional[int] = None,
        arrivals: Optional[np.ndarray] = None,
        action_set: Optional[Iterable[int]] = DURATIONS_S,
    ):
        self.scenario = scenario
        self.spec = scenario.intersection
        self.duration_s = int(scenario.duration_s)
        self.seed = scenario.seed if seed is None else seed
        self.action_set = None if action_set is None else frozenset(int(a) for a in action_set)

        self.lane_mov = lane_layout(scenario)
        self.mov_lanes = self.spec.lane_counts.astype(np.int64)
        n_lanes = len(self.lane_mov)
        if arrivals is None:
            arrivals = sample_arrivals(scenario, self.seed)
        arrivals = np.ascontiguousarray(arrivals, dtype=np.int64)
        if arrivals.shape != (self.duration_s, n_lanes):
            raise ValueError(f"arrivals must have shape {(self.duration_s, n_lanes)}, got {arrivals.shape}")
        self.arrivals = arrivals

        cap = 64
        self.pos = np.zeros((n_lanes, cap))
        self.speed = np.zeros((n_lanes, cap))
        self.wait = np.zeros((n_lanes, cap))
        self.spawn_t = np.zeros((n_lanes, cap), dtype=np.int64)
        self.vid = np.zeros((n_lanes, cap), dtype=np.int64)
        self.head = np.zeros(n_lanes, dtype=np.int64)
        self.count = np.zeros(n_lanes, dtype=np.int64)
        self.last_dep = np.full(n_lanes, -1e9)
        self.totals = np.zeros(4)  # spawned, departed, waiting, next id

        T = self.duration_s
        self.crossings = np.zeros((T, N_MOVEMENTS), dtype=np.int64)
        self.occupancy = np.zeros((T, N_MOVEMENTS))
        self.queue_hist = np.zeros((T, N_MOVEMENTS), dtype=np.int64)
        self.color_hist = np.zeros((T, N_MOVEMENTS), dtype=np.int8)
        self.phase_hist = np.zeros(T, dtype=np.int64)

        self.clock_s = 0
        self.colors = np.full(N_MOVEMENTS, RED, dtype=np.int8)
        self.color_elapsed = np.zeros(N_MOVEMENTS)
        self.phase_index = 0
        self.yellow_left = 0
        self.green_left = 0
        self._phase_masks = [self.spec.phase_mask(k) for k in range(self.spec.n_phases)]
        self.switch_to(0)

    # ------------------------------------------------------------------
    # signal control

    @property
    def n_phases(self) -> int:
        return self.spec.n_phases

    @property
    def in_yellow(self) -> bool:
        return self.yellow_left > 0

    @property
    def finished(self) -> bool:
        return self.clock_s >= self.duration_s

    @property
    def phase_done(self) -> bool:
        return self.yellow_left == 0 and self.green_left == 0

    def _check_duration(self, duration_s) -> int:
        d = int(duration_s)
        if d != duration_s or d <= 0:
            raise SimulationError(f"phase duration must be a positive whole number of seconds, got {duration_s}")
        if self.action_set is not None and d not in self.action_set:
            raise SimulationError(f"duration {d}s is not in the configured action set {sorted(self.action_set)}")
        return d

    def switch_to(self, phase: int) -> None:
        """Make ``phase`` the active phase, inserting yellow where needed.

        Movements green now and also in ``phase`` stay green. Movements green
        now but not in ``phase`` show yellow for ``yellow_s`` seconds before
        turning red; the new movements turn green once the yellow ends. The
        phase is held open-ended until :meth:`hold` schedules its green.
        """
        if not 0 <= phase < self.n_phases:
            raise SimulationError(f"phase {phase} out of range for {self.n_phases} phases")
        if self.in_yellow:
            raise SimulationError("cannot switch phases during a yellow interlude")
        target = self._phase_masks[phase]
        ending = (self.colors == GREEN) & ~target
        self.phase_index = phase
        self.green_left = 0
        if ending.any() and self.spec.yellow_s > 0:
            self.colors[ending] = YELLOW
            self.color_elapsed[ending] = 0.0
            self.yellow_left = int(self.spec.yellow_s)
        else:
            self._finish_transition()

    def _finish_transition(self) -> None:
        target = self._phase_masks[self.phase_index]
        to_red = (self.colors != RED) & ~target
        to_green = (self.colors != GREEN) & target
        self.colors[to_red] = RED
        self.color_elapsed[to_red] = 0.0
        self.colors[to_green] = GREEN
        self.color_elapsed[to_green] = 0.0
        self.yellow_left = 0

    def hold(self, duration_s) -> None:
        """Keep the active phase green for ``duration_s`` more seconds (after any yellow)."""
        self.green_left = self._check_duration(duration_s)

    def begin_phase(self, duration_s) -> None:
        """Advance to the next phase in cyclic order and give it ``duration_s`` of green."""
        d = self._check_duration(duration_s)
        if not self.phase_done:
            raise SimulationError("previous phase has not completed")
        self.switch_to((self.phase_index + 1) % self.n_phases)
        self.green_left = d

    # ------------------------------------------------------------------
    # time advance

    def step(self) -> StepReport:
        """Advance one simulated second."""
        self.advance(1)
        spawned, departed = int(self.totals[0]), int(self.totals[1])
        return StepReport(self.clock_s, spawned, departed, spawned - departed)

    def advance(self, n: int) -> int:
        """Advance up to ``n`` seconds; returns the number actually simulated."""
        if self.finished:
            raise SimulationFinished(f"simulation of {self.spec.id} already reached {self.duration_s}s")
        n = min(int(n), self.duration_s - self.clock_s)
        done = 0
        while done < n:
            chunk = n - done
            if self.yellow_left > 0:
                chunk = min(chunk, self.yellow_left)
            self._run_chunk(chunk)
            done += chunk
            self.color_elapsed += chunk
            if self.yellow_left > 0:
                self.yellow_left -= chunk
                if self.yellow_left == 0:
                    self._finish_transition()
            else:
                self.green_left = max(0, self.green_left - chunk)
        return done

    def run_phase(self) -> int:
        """Run the scheduled yellow and green to completion (or episode end)."""
        n = self.yellow_left + self.green_left
        if n == 0 or self.finished:
            return 0
        return self.advance(n)

    def _ensure_capacity(self, t0: int, n: int, extra: int = 0) -> None:
        need = int((self.count + self.arrivals[t0:t0 + n].sum(axis=0)).max(initial=0)) + extra
        cap = self.pos.shape[1]
        if need <= cap:
            return
        new_cap = cap
        while new_cap < need:
            new_cap *= 2
        n_lanes = len(self.lane_mov)
        for name in ("pos", "speed", "wait", "spawn_t", "vid"):
            old = getattr(self, name)
            new = np.zeros((n_lanes, new_cap), dtype=old.dtype)
            for ln in range(n_lanes):
                idx = (self.head[ln] + np.arange(self.count[ln])) % cap
                new[ln, : self.count[ln]] = old[ln, idx]
            setattr(self, name, new)
        self.head[:] = 0

    def _run_chunk(self, n: int) -> None:
        t0 = self.clock_s
        self._ensure_capacity(t0, n)
        green = self.colors == GREEN
        advance_lanes(
            t0, n, green, self.lane_mov, self.mov_lanes, self.arrivals,
            self.pos, self.speed, self.wait, self.spawn_t, self.vid,
            self.head, self.count, self.last_dep,
            self.crossings, self.occupancy, self.queue_hist, self.totals,
            APPROACH_LENGTH_M, FREE_SPEED_MPS, JAM_SPACING_M, SATURATION_HEADWAY_S,
            float(self.spec.detector_length_m), STOP_SPEED_MPS,
        )
        self.color_hist[t0:t0 + n] = self.colors
        self.phase_hist[t0:t0 + n] = self.phase_index
        self.clock_s = t0 + n

    # ------------------------------------------------------------------
    # inspection

    @property
    def spawned(self) -> int:
        return int(self.totals[0])

    @property
    def departed(self) -> int:
        return int(self.totals[1])

    @property
    def in_network(self) -> int:
        return int(self.count.sum())

    @property
    def total_waiting_s(self) -> float:
        return float(self.totals[2])

    def vehicles(self) -> list[Vehicle]:
        cap = self.pos.shape[1]
        out = []
        for ln, m in enumerate(self.lane_mov):
            for k in range(self.count[ln]):
                i = (self.head[ln] + k) % cap
                out.append(
                    Vehicle(
                        id=int(self.vid[ln, i]), movement=int(m), lane=ln,
                        position_m=float(self.pos[ln, i]), speed_mps=float(self.speed[ln, i]),
                        waiting_s=float(self.wait[ln, i]), spawned_at_s=int(self.spawn_t[ln, i]),
                    )
                )
        return out

    def place_queue(self, movement: int, n: int, lane: int = 0) -> None:
        """Put ``n`` stopped vehicles at jam spacing behind the stop line of one lane.

        Intended for setting up hand-checkable situations; the vehicles count
        as spawned now.
        """
        lanes = np.flatnonzero(self.lane_mov == movement)
        if len(lanes) == 0:
            raise SimulationError(f"movement {MOVEMENT_NAMES[movement]} is absent")
        ln = int(lanes[lane])
        self._ensure_capacity(self.clock_s, 0, extra=n)
        cap = self.pos.shape[1]
        for _ in range(n):
            c = self.count[ln]
            tail = 0.0 if c == 0 else self.pos[ln, (self.head[ln] + c - 1) % cap] + JAM_SPACING_M
            i = (self.head[ln] + c) % cap
            self.pos[ln, i] = min(tail, APPROACH_LENGTH_M)
            self.speed[ln, i] = 0.0
            self.wait[ln, i] = 0.0
            self.spawn_t[ln, i] = self.clock_s
            self.vid[ln, i] = int(self.totals[3])
            self.totals[3] += 1
            self.totals[0] += 1
            self.count[ln] = c + 1

    def read_observation(self, movement: int, window_s: float) -> RawObservation:
        """Detector readings for one movement over the last ``window_s`` seconds."""
        if window_s < 1:
            raise ValueError("window_s must be >= 1")
        lanes = self.mov_lanes[movement]
        t1 = self.clock_s
        t0 = max(0, t1 - int(window_s))
        if lanes == 0 or t1 == t0:
            return RawObservation(0.0, 0.0, 0.0, 0)
        span = t1 - t0
        occ = self.occupancy[t0:t1, movement]
        return RawObservation(
            flow=float(self.crossings[t0:t1, movement].sum()) / span / lanes,
            occ_mean=float(occ.mean()),
            occ_max=float(occ.max()),
            queue=int(self.queue_hist[t1 - 1, movement]),
        )

    def current_queue(self) -> np.ndarray:
        if self.clock_s == 0:
            return np.zeros(N_MOVEMENTS, dtype=np.int64)
        return self.queue_hist[self.clock_s - 1].copy()

    def metrics(self) -> EpisodeMetrics:
        n = self.spawned
        avg = self.total_waiting_s / n if n else 0.0
        return EpisodeMetrics(avg_waiting_s=avg, vehicles=n, throughput=self.departed)

    def write_trace(self, path) -> None:
        """Per-second CSV: clock, phase, colour and stopped-queue per movement."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["clock_s", "phase_index"]
                + [f"color_{n}" for n in MOVEMENT_NAMES]
                + [f"queue_{n}" for n in MOVEMENT_NAMES]
            )
            for t in range(self.clock_s):
                w.writerow(
                    [t, int(self.phase_hist[t])]
                    + [COLOR_NAMES[c] for c in self.color_hist[t]]
                    + [int(q) for q in self.queue_hist[t]]
                )


def metrics(world: SimWorld) -> EpisodeMetrics:
    return world.metrics()


def read_observation(world: SimWorld, movement: int, window_s: float) -> RawObservation:
    return world.read_observation(movement, window_s)


def step(world: SimWorld) -> StepReport:
    return world.step()


def begin_phase(world: SimWorld, duration_s) -> None:
    world.begin_phase(duration_s)
