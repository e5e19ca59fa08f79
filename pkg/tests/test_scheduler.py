import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pkdprune.scheduler import (INTACT, ScheduleConfig, crossed_levels, level_key, maybe_snapshot,
                                playlist_teacher_at, select_teacher_stage1, stage1_level, stage2_playlist, target_at)

from oracles import stage1_oracle

GRID = list(itertools.product((0.05, 0.10, 0.20), (0.01, 0.10), (0.2, 0.5, 0.7)))


class KeysOnly:
    def __init__(self, keys=()):
        self._keys = list(keys)
        self.saved = []

    def keys(self):
        return sorted(self._keys)

    def save(self, key, module):
        assert key not in self._keys
        self._keys.append(key)
        self.saved.append(key)


def full_store(t, i):
    return KeysOnly(level_key(k, i) for k in range(1, int(round(t / i)) + 2))


def test_target_examples():
    cfg = ScheduleConfig(t=0.5, warmup_steps=4000)
    assert target_at(0, cfg) == 0.0
    assert target_at(4000, cfg) == 0.5
    assert target_at(1000, cfg) == 0.125
    assert target_at(9000, cfg) == 0.5


def test_stage1_examples():
    cfg = ScheduleConfig(g=0.10, i=0.01)
    store = full_store(0.5, 0.01)
    assert select_teacher_stage1(0.05, cfg, store) == INTACT
    assert select_teacher_stage1(0.235, cfg, store) == 0.13


def oracle_key(s, t, g, i):
    k = stage1_oracle(s, t, g, i)
    return INTACT if k is None else level_key(k, i)


def check_grid(samples=10_000, seed=0):
    """Returns the number of disagreements between the selector and the oracle over the grid."""
    rng = np.random.default_rng(seed)
    bad = 0
    for g, i, t in GRID:
        cfg = ScheduleConfig(t=t, g=g, i=i)
        store = full_store(t, i)
        for s in rng.uniform(0.0, t, size=samples):
            if select_teacher_stage1(float(s), cfg, store) != oracle_key(float(s), t, g, i):
                bad += 1
    return bad


def test_stage1_matches_oracle_on_grid():
    assert check_grid(2000) == 0


@pytest.mark.parametrize("g,i,t", GRID)
def test_stage1_exact_boundaries(g, i, t):
    cfg = ScheduleConfig(t=t, g=g, i=i)
    store = full_store(t, i)
    for k in range(1, int(round(t / i)) + 1):
        lo = round(k * i + g, 12)
        assert select_teacher_stage1(lo, cfg, store) == oracle_key(lo, t, g, i)


def test_missing_snapshot_falls_back(caplog):
    cfg = ScheduleConfig(g=0.10, i=0.01)
    with caplog.at_level(logging.WARNING):
        assert select_teacher_stage1(0.235, cfg, KeysOnly([0.05, 0.11])) == 0.11
        assert select_teacher_stage1(0.235, cfg, KeysOnly([0.2])) == INTACT
    assert "missing" in caplog.text


def test_snapshot_crossings():
    cfg = ScheduleConfig(i=0.01)
    store = KeysOnly()
    assert maybe_snapshot(0.009, store, cfg, None) == []
    assert maybe_snapshot(0.011, store, cfg, None) == [0.01]
    assert maybe_snapshot(0.012, store, cfg, None) == []
    assert maybe_snapshot(0.019, store, cfg, None) == []
    assert maybe_snapshot(0.032, store, cfg, None) == [0.02, 0.03]
    assert store.saved == [0.01, 0.02, 0.03]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 0.6), min_size=1, max_size=30))
def test_snapshots_match_stepwise_oracle(path):
    i = 0.01
    store = KeysOnly()
    cfg = ScheduleConfig(i=i)
    seen = set()
    for s in path:
        maybe_snapshot(s, store, cfg, None)
        seen |= {level_key(k, i) for k in range(1, 100) if k * i <= s + 1e-12}
    assert set(store.keys()) == seen
    assert len(store.saved) == len(set(store.saved))


def test_playlist_examples():
    cfg = ScheduleConfig(t=0.5, g=0.1, stage2_steps=1000, final_period_fraction=0.2)
    assert stage2_playlist(KeysOnly([0.1, 0.2, 0.3, 0.4]), cfg) == [
        (0.4, 200), (0.3, 200), (0.2, 200), (0.1, 200), (INTACT, 200)]
    cfg = ScheduleConfig(t=0.5, g=0.1, stage2_steps=100, final_period_fraction=0.5)
    assert stage2_playlist(KeysOnly([0.1]), cfg) == [(0.1, 50), (INTACT, 50)]
    assert stage2_playlist(KeysOnly(), cfg) == [(INTACT, 100)]


def test_playlist_remainder_goes_first():
    cfg = ScheduleConfig(t=0.5, g=0.1, stage2_steps=10, final_period_fraction=0.0)
    assert stage2_playlist(KeysOnly([0.1, 0.2, 0.3]), cfg) == [(0.3, 4), (0.2, 3), (0.1, 3), (INTACT, 0)]


def playlist_ok(playlist, budget):
    keys = [k for k, _ in playlist[:-1]]
    return (playlist[-1][0] == INTACT and sum(n for _, n in playlist) == budget
            and all(a > b for a, b in zip(keys, keys[1:])))


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(GRID), st.integers(0, 5000), st.floats(0, 1))
def test_playlist_weak_to_strong_and_budget(gi, budget, frac):
    g, i, t = gi
    cfg = ScheduleConfig(t=t, g=g, i=i, stage2_steps=budget, final_period_fraction=frac)
    pl = stage2_playlist(full_store(t, i), cfg)
    assert playlist_ok(pl, budget)
    assert all(k <= t - g + 1e-9 for k, _ in pl[:-1])


def test_playlist_teacher_lookup():
    pl = [(0.3, 2), (0.2, 1), (INTACT, 2)]
    got = [playlist_teacher_at(pl, s) for s in range(6)]
    assert got == [0.3, 0.3, 0.2, INTACT, INTACT, INTACT]


def test_crossed_levels_is_increasing():
    assert crossed_levels(0.05, 0.01, [0.02]) == [0.01, 0.03, 0.04, 0.05]


def test_config_ranges():
    with pytest.raises(ValueError):
        ScheduleConfig(t=1.0)
    with pytest.raises(ValueError):
        ScheduleConfig(final_period_fraction=1.5)
    with pytest.raises(ValueError):
        ScheduleConfig(i=0.2, g=0.1).validate_strict()
    with pytest.raises(ValueError):
        ScheduleConfig(t=0.1, g=0.1).validate_strict()
    assert stage1_level(0.1, 0.1, 0.01) is None
