from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adlight.features import (
    RewardNormalizer,
    assemble_state,
    check_permutation,
    movement_shuffle,
    normalize_reward,
    random_permutations,
    raw_reward,
    shuffle_batch,
)
from adlight.microsim import DURATIONS_S, SimWorld
from adlight.topology import builtin_catalog, catalog_by_id, rotate, rotation_map

N, NL, E, EL, W, WL, S, SL = range(8)

permutations = st.permutations(list(range(8)))


def test_absent_rows_are_zero_on_t_junction():
    sc = catalog_by_id()["INT3-1"]
    w = SimWorld(sc, seed=1)
    w.hold(30)
    w.run_phase()
    state = assemble_state(w, 30)
    for m in (N, NL, WL, S):
        assert not state[m].any()
    assert state[E].any() and state[SL].any()


def test_through_row_composition():
    sc = catalog_by_id()["INT1-1"]
    w = SimWorld(sc, seed=2, action_set=None)
    assert w.mov_lanes[N] == 3
    w.hold(12)
    w.run_phase()
    obs = w.read_observation(N, 12)
    row = assemble_state(w, 12)[N]
    assert row.tolist() == pytest.approx([obs.flow, obs.occ_mean, obs.occ_max, 1, 0.6, 12 / 70, 1, 1])


def test_empty_network_state_reflects_signals_only():
    sc = replace(catalog_by_id()["INT2-3"], arrival_rates=(0.0,) * 8, demand_profile=None)
    w = SimWorld(sc, action_set=None)
    w.hold(4)
    w.run_phase()
    state = assemble_state(w, 5)
    assert not state[:, :3].any()
    green = state[:, 7] == 1
    assert green.sum() == 4  # two-phase plan: first phase serves four movements
    assert not state[:, 6].any()  # 4 s is below the 5 s minimum green


def test_state_shape_for_every_catalog_entry():
    for sc in builtin_catalog():
        w = SimWorld(sc, seed=0)
        w.hold(20)
        w.run_phase()
        s = assemble_state(w, 20)
        assert s.shape == (8, 8)
        assert np.isfinite(s).all()
        assert (s[~sc.intersection.present] == 0).all()


@pytest.mark.parametrize(
    "queues, expected", [((2, 0, 1, 0, 0, 0, 3, 0), -6), ((0,) * 8, 0), ((1,) * 8, -8)]
)
def test_raw_reward(queues, expected):
    w = SimWorld(catalog_by_id()["INT1-1"])
    w.queue_hist[0] = queues
    w.clock_s = 1
    assert raw_reward(w) == expected


def test_normalizer_examples():
    n = RewardNormalizer()
    assert normalize_reward(n, 0.0) == 0.0
    n = RewardNormalizer()
    n.update(-3.0)
    assert normalize_reward(n, -5.0) == -10.0
    n = RewardNormalizer()
    n.update(-2.0)
    n.update(-4.0)
    assert (n.mean, n.std) == (-3.0, 1.0)
    assert normalize_reward(n, -3.0) == 0.0


def test_frozen_normalizer_does_not_update():
    n = RewardNormalizer()
    for r in (-1.0, -2.0, -6.0):
        n.update(r)
    n.frozen = True
    before = (n.count, n.mean, n.m2)
    n.normalize(-4.0)
    assert (n.count, n.mean, n.m2) == before


@given(st.lists(st.integers(-200, 0).map(float), min_size=1, max_size=60))
def test_normalizer_matches_naive_history(rewards):
    n = RewardNormalizer()
    for k, r in enumerate(rewards):
        hist = np.array(rewards[:k])
        mu = hist.mean() if k else 0.0
        sd = hist.std() if k else 0.0
        assert n.mean == pytest.approx(mu, abs=1e-9)
        assert n.std == pytest.approx(sd, abs=1e-9, rel=1e-9)
        expected = np.clip((r - mu) / (sd + 1e-8), -10, 10)
        assert n.normalize(r) == pytest.approx(expected, abs=1e-6, rel=1e-6)


def test_permutation_example():
    rows = np.arange(8)[:, None] * np.ones((8, 8))  # row i tagged with i (m_{i+1})
    out = movement_shuffle(rows, np.array([3, 7, 1, 8, 2, 4, 6, 5]) - 1)
    assert out[:, 0].astype(int).tolist() == [2, 6, 0, 7, 1, 3, 5, 4]


def test_identity_and_inverse():
    rng = np.random.default_rng(0)
    s = rng.random((8, 8))
    assert np.array_equal(movement_shuffle(s, np.arange(8)), s)
    p = rng.permutation(8)
    assert np.array_equal(movement_shuffle(movement_shuffle(s, p), np.argsort(p)), s)


@given(permutations)
def test_shuffle_preserves_rows_and_input(perm):
    s = np.random.default_rng(1).random((8, 8))
    keep = s.copy()
    out = movement_shuffle(s, np.array(perm))
    assert np.array_equal(s, keep)
    assert sorted(map(tuple, out)) == sorted(map(tuple, s))


@pytest.mark.parametrize("bad", [[0, 0, 1, 2, 3, 4, 5, 6], [0, 1, 2], [1, 2, 3, 4, 5, 6, 7, 8]])
def test_non_bijection_rejected(bad):
    with pytest.raises(ValueError):
        check_permutation(np.array(bad))


def test_batch_shuffle_matches_single():
    rng = np.random.default_rng(3)
    states = rng.random((5, 8, 8))
    perms = random_permutations(rng, 5)
    out = shuffle_batch(states, perms)
    for b in range(5):
        assert np.array_equal(out[b], movement_shuffle(states[b], perms[b]))


def rotated_arrivals(world, rot_world, perm):
    """Lane arrivals of ``world`` re-indexed onto the rotated lane layout."""
    out = np.zeros_like(rot_world.arrivals)
    for m in range(8):
        src = np.flatnonzero(world.lane_mov == m)
        dst = np.flatnonzero(rot_world.lane_mov == perm[m])
        out[:, dst] = world.arrivals[:, src]
    return out


@settings(max_examples=12, deadline=None)
@given(st.sampled_from(["INT1-1", "INT1-3", "INT3-1", "INT4"]), st.integers(1, 3), st.integers(0, 1000))
def test_rotation_is_a_row_permutation(sid, k, seed):
    sc = replace(catalog_by_id()[sid], duration_s=300)
    rsc = rotate(sc, k)
    perm = rotation_map(k)
    w = SimWorld(sc, seed=seed)
    rw = SimWorld(rsc, arrivals=rotated_arrivals(w, SimWorld(rsc, seed=0), perm))
    inv = np.argsort(perm)
    rng = np.random.default_rng(seed)
    first = True
    while not w.finished:
        d = int(rng.choice(DURATIONS_S))
        for world in (w, rw):
            world.hold(d) if first else world.begin_phase(d)
            world.run_phase()
        first = False
        window = max(5, d)
        assert np.array_equal(assemble_state(rw, window), movement_shuffle(assemble_state(w, window), inv))
