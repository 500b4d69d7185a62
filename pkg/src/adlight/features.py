"""Movement-level state, queue reward and the movement-shuffle augmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .microsim import GREEN, SimWorld
from .topology import N_MOVEMENTS

N_FEATURES = 8
FEATURE_NAMES = (
    "flow", "occ_mean", "occ_max", "is_straight", "lanes", "duration", "is_min_green", "is_green",
)
LANE_SCALE = 5.0
DURATION_SCALE = 70.0
MIN_WINDOW_S = 5
REWARD_CLIP = 10.0


def assemble_state(world: SimWorld, window_s: float) -> np.ndarray:
    """Build the 8x8 movement-feature matrix; absent movements are zero rows."""
    if window_s < 1:
        raise ValueError("window_s must be >= 1")
    spec = world.spec
    state = np.zeros((N_MOVEMENTS, N_FEATURES))
    lanes = world.mov_lanes
    present = lanes > 0
    t1 = world.clock_s
    t0 = max(0, t1 - int(window_s))
    if t1 > t0:
        span = t1 - t0
        with np.errstate(divide="ignore", invalid="ignore"):
            flow = world.crossings[t0:t1].sum(axis=0) / span / lanes
        occ = world.occupancy[t0:t1]
        state[:, 0] = np.where(present, flow, 0.0)
        state[:, 1] = occ.mean(axis=0)
        state[:, 2] = occ.max(axis=0)
    green = world.colors == GREEN
    state[:, 3] = np.arange(N_MOVEMENTS) % 2 == 0
    state[:, 4] = lanes / LANE_SCALE
    state[:, 5] = world.color_elapsed / DURATION_SCALE
    state[:, 6] = green & (world.color_elapsed >= spec.min_green_s)
    state[:, 7] = green
    state[~present] = 0.0
    return state


def raw_reward(world: SimWorld) -> float:
    """Negative total stopped queue over the eight movement detectors."""
    return -float(world.current_queue().sum())


@dataclass
class RewardNormalizer:
    """Running mean/std of raw rewards (Welford), applied before folding in."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    eps: float = 1e-8
    clip: float = REWARD_CLIP
    frozen: bool = False

    @property
    def std(self) -> float:
        if self.count < 1:
            return 0.0
        return math.sqrt(self.m2 / self.count)

    def normalize(self, raw: float) -> float:
        z = (raw - self.mean) / (self.std + self.eps)
        z = min(max(z, -self.clip), self.clip)
        if not self.frozen:
            self.update(raw)
        return z

    def update(self, raw: float) -> None:
        self.count += 1
        delta = raw - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (raw - self.mean)

    def copy(self) -> "RewardNormalizer":
        return RewardNormalizer(self.count, self.mean, self.m2, self.eps, self.clip, self.frozen)


def normalize_reward(norm: RewardNormalizer, raw: float) -> float:
    return norm.normalize(raw)


def check_permutation(permutation) -> np.ndarray:
    perm = np.asarray(permutation)
    if perm.shape != (N_MOVEMENTS,) or not np.issubdtype(perm.dtype, np.integer):
        raise ValueError("permutation must be 8 integers")
    if sorted(perm.tolist()) != list(range(N_MOVEMENTS)):
        raise ValueError(f"{perm.tolist()} is not a bijection on 0..7")
    return perm


def movement_shuffle(state: np.ndarray, permutation) -> np.ndarray:
    """Row ``i`` of the result is row ``permutation[i]`` of ``state``."""
    perm = check_permutation(permutation)
    return np.asarray(state)[..., perm, :].copy()


def random_permutations(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` independent uniform permutations of the eight rows."""
    return np.argsort(rng.random((n, N_MOVEMENTS)), axis=1)


def shuffle_batch(states: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """Apply one permutation per sample to a (B, 8, F) batch."""
    return np.take_along_axis(states, perms[:, :, None], axis=1)
