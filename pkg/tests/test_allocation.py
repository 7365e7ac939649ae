import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stalab.allocation import (AllocationConfigError, AllocationMode, SubStepAllocation, group_by_task,
                               plan_step, read_trace, sample_subset, write_trace)
from stalab.rng import STREAM_ALLOC, stream


def test_ft_plan():
    plan = plan_step(AllocationMode("FT"), 3, 2, np.random.default_rng(0))
    assert len(plan) == 1 and plan[0].subsets == (frozenset({0, 1}),) * 3


def test_ista_two_examples_take_complements():
    plan = plan_step(AllocationMode("ISTA", 1), 2, 2, stream(0, STREAM_ALLOC, 0))
    assert len(plan) == 2
    for i in range(2):
        assert plan[0].subsets[i] | plan[1].subsets[i] == {0, 1}
        assert not plan[0].subsets[i] & plan[1].subsets[i]


def test_sta_frequency():
    hits = total = 0
    for step in range(100):
        a = plan_step(AllocationMode("STA", 1), 100, 2, stream(7, STREAM_ALLOC, step))[0]
        hits += sum(0 in s for s in a.subsets)
        total += 100
    assert 0.48 <= hits / total <= 0.52


def test_sample_subset_examples():
    r = np.random.default_rng(0)
    assert sample_subset({3}, 1, r) == {3}
    assert sample_subset({1, 2, 3}, 3, r) == {1, 2, 3}
    counts = {1: 0, 2: 0}
    for _ in range(10_000):
        (t,) = sample_subset({1, 2}, 1, r)
        counts[t] += 1
    assert abs(counts[1] / 10_000 - 0.5) <= 0.02


def test_sample_subset_empty():
    with pytest.raises(ValueError):
        sample_subset(set(), 1, np.random.default_rng(0))


def test_group_by_task_examples():
    a = SubStepAllocation((frozenset({0}), frozenset({1})), 2)
    g = group_by_task(a)
    assert g[0].tolist() == [0] and g[1].tolist() == [1]
    ft = plan_step(AllocationMode("FT"), 2, 2, np.random.default_rng(0))[0]
    assert [x.tolist() for x in group_by_task(ft)] == [[0, 1], [0, 1]]
    assert ft.counts().tolist() == [2, 2]


def test_ista_three_tasks_is_permutation():
    for step in range(50):
        plan = plan_step(AllocationMode("ISTA", 1), 4, 3, stream(1, STREAM_ALLOC, step))
        assert len(plan) == 3
        for i in range(4):
            seq = [t for a in plan for t in a.subsets[i]]
            assert sorted(seq) == [0, 1, 2]


@pytest.mark.parametrize("mode", [AllocationMode("STA", 3), AllocationMode("FT"), AllocationMode("X")])
def test_config_errors(mode):
    if mode.kind == "X":
        with pytest.raises(AllocationConfigError):
            plan_step(mode, 2, 2, np.random.default_rng(0))
    elif mode.kind == "STA":
        with pytest.raises(AllocationConfigError):
            plan_step(mode, 2, 2, np.random.default_rng(0))
    else:
        with pytest.raises(AllocationConfigError):
            plan_step(mode, 0, 2, np.random.default_rng(0))


def test_stagap_gap_one_is_rejected():
    with pytest.raises(AllocationConfigError):
        AllocationMode("STAGap", 1, gap=1).validate(2)


def test_sta_with_k_equal_t_is_ft():
    for T in range(2, 6):
        a = plan_step(AllocationMode("STA", T), 5, T, np.random.default_rng(T))[0]
        assert a.subsets == (frozenset(range(T)),) * 5


def test_stagap_revisit_structure():
    plan = plan_step(AllocationMode("STAGap", 1, gap=3), 6, 2, np.random.default_rng(0))
    assert [a.delay for a in plan] == [0, 3]
    assert plan[0].batch_size == plan[1].batch_size == 6
    comp = plan_step(AllocationMode("STAGap", 1, gap=3, complement=True), 6, 2, np.random.default_rng(0))
    for s1, s2 in zip(comp[0].subsets, comp[1].subsets):
        assert s1 | s2 == {0, 1} and not s1 & s2


def test_determinism():
    a = [plan_step(AllocationMode("STA", 2), 8, 4, stream(5, STREAM_ALLOC, s)) for s in range(5)]
    b = [plan_step(AllocationMode("STA", 2), 8, 4, stream(5, STREAM_ALLOC, s)) for s in range(5)]
    assert a == b


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_ista_invariants_property(T, k, m, seed):
    k = min(k, T)
    plan = plan_step(AllocationMode("ISTA", k), m, T, np.random.default_rng(seed))
    assert len(plan) == math.ceil(T / k)
    for a in plan[:-1]:
        assert all(len(s) == k for s in a.subsets)
    for i in range(m):
        subs = [a.subsets[i] for a in plan]
        assert frozenset().union(*subs) == frozenset(range(T))
        assert sum(len(s) for s in subs) == T


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_sta_subset_sizes_property(T, k, m, seed):
    k = min(k, T)
    (a,) = plan_step(AllocationMode("STA", k), m, T, np.random.default_rng(seed))
    assert all(len(s) == k and s <= frozenset(range(T)) for s in a.subsets)
    assert a.counts().sum() == m * k


def test_trace_round_trip(tmp_path):
    plan = plan_step(AllocationMode("ISTA", 1), 3, 2, np.random.default_rng(0))
    idx = np.array([10, 11, 12])
    write_trace(tmp_path / "t.csv", [(0, j, idx, a) for j, a in enumerate(plan)])
    rows = read_trace(tmp_path / "t.csv")
    assert len(rows) == 6
    assert {r[2] for r in rows} == {10, 11, 12}
