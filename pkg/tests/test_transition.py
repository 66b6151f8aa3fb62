import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from selfheal.transition import (
    FailurePoint,
    IterationLayout,
    NoSurvivors,
    Placement,
    StateSource,
    UnrecoverableState,
    digest,
    failure_free_reference,
    micro_batch_gradient,
    plan_migration,
    progressed,
    recomputation_cost,
    redistribute,
    resume_scenario1,
    resume_scenario2,
    run_iteration,
    segment_bounds,
    verify,
)

GOLDEN = json.loads((Path(__file__).parent / "fixtures" / "gradients.json").read_text())


@pytest.mark.parametrize("key", sorted(GOLDEN["dims8"]))
def test_gradient_golden_values(key):
    it, mb = map(int, key.split(","))
    assert micro_batch_gradient(it, mb, 8).tolist() == GOLDEN["dims8"][key]


@pytest.mark.parametrize("key", sorted(GOLDEN["dims64_digest"]))
def test_gradient_golden_digests(key):
    it, mb = map(int, key.split(","))
    assert digest(micro_batch_gradient(it, mb)) == GOLDEN["dims64_digest"][key]


def test_gradient_is_pure_and_read_only():
    a, b = micro_batch_gradient(1, 1), micro_batch_gradient(1, 1)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, micro_batch_gradient(1, 2))
    with pytest.raises(ValueError):
        a[0] = 0
    with pytest.raises(ValueError):
        micro_batch_gradient(1, 1, 0)


def test_reference_matches_paired_layout():
    layout = IterationLayout.initial(2, 1, 8)
    assert layout.k == 4
    want = sum(micro_batch_gradient(0, mb).astype(np.int64) for mb in range(1, 9))
    assert np.array_equal(run_iteration(layout), want)
    assert np.array_equal(failure_free_reference(layout), want)


def test_single_rank_is_plain_accumulation():
    layout = IterationLayout.initial(1, 2, 5)
    assert np.array_equal(run_iteration(layout), failure_free_reference(layout))


def test_layout_validation():
    with pytest.raises(ValueError):
        IterationLayout.initial(3, 1, 8)
    with pytest.raises(ValueError):
        IterationLayout.initial(0, 1, 8)


def test_segments_cover_vector():
    segs = segment_bounds(64, 3)
    assert segs[0][0] == 0 and segs[-1][1] == 64
    assert all(a[1] == b[0] for a, b in zip(segs, segs[1:]))


def test_redistribute_divisible_case():
    layout = IterationLayout.initial(4, 1, 12)
    owned = redistribute(layout, 2)
    assert sorted(owned) == [0, 1, 3]
    assert {r: len(v) for r, v in owned.items()} == {0: 4, 1: 4, 3: 4}


def test_redistribute_two_ranks():
    layout = IterationLayout.initial(2, 1, 8)
    assert sorted(redistribute(layout, 1)[0]) == list(range(1, 9))


def test_redistribute_remainder_is_a_cover():
    layout = IterationLayout.initial(3, 1, 12)
    owned = redistribute(layout, 0)
    assert owned == {1: (5, 6, 7, 8, 1, 3), 2: (9, 10, 11, 12, 2, 4)}
    assert sorted(mb for v in owned.values() for mb in v) == list(range(1, 13))


def test_redistribute_needs_survivors():
    with pytest.raises(NoSurvivors):
        redistribute(IterationLayout.initial(1, 1, 4), 0)
    with pytest.raises(ValueError):
        redistribute(IterationLayout.initial(2, 1, 4), 5)


@given(st.integers(2, 8), st.integers(1, 4), st.data())
def test_redistribution_keeps_disjoint_cover(dp, mult, data):
    layout = IterationLayout.initial(dp, 1, dp * mult)
    owned = redistribute(layout, data.draw(st.integers(0, dp - 1)))
    flat = sorted(mb for v in owned.values() for mb in v)
    assert flat == list(range(1, dp * mult + 1))


def test_scenario1_partial_progress():
    layout = IterationLayout.initial(2, 1, 8)
    state = progressed(layout, 2)
    assert np.array_equal(resume_scenario1(state, 1), failure_free_reference(layout))


def test_scenario1_nothing_done_and_everything_done():
    layout = IterationLayout.initial(4, 2, 16)
    for steps in (0, layout.k):
        state = progressed(layout, steps)
        assert np.array_equal(resume_scenario1(state, 3), failure_free_reference(layout))


def test_scenario1_survivor_progress_is_not_recomputed():
    layout = IterationLayout.initial(3, 1, 6)
    state = progressed(layout, [2, 1, 0])
    before = state.accum[0].copy()
    resume_scenario1(state, 2)
    assert state.completed[0][:2] == [1, 2]
    # rank 0 was dealt micro-batch 5 and adds only that
    assert np.array_equal(state.accum[0], before + micro_batch_gradient(0, 5))


def test_scenario1_rejects_started_reduce_and_single_rank():
    layout = IterationLayout.initial(2, 2, 4)
    state = progressed(layout, 2)
    state.reduce_segment(0)
    with pytest.raises(ValueError):
        resume_scenario1(state, 0)
    with pytest.raises(NoSurvivors):
        resume_scenario1(progressed(IterationLayout.initial(1, 1, 4), 1), 0)


def test_scenario2_reduced_stage_is_omitted():
    layout = IterationLayout.initial(4, 4, 16)
    state = progressed(layout, layout.k)
    state.reduce_segment(0)
    state.reduce_segment(1)
    completed = {r: list(v) for r, v in state.completed.items()}
    out = resume_scenario2(state, 2, 1)
    assert np.array_equal(out, failure_free_reference(layout))
    assert state.completed == completed


def test_scenario2_unreduced_stage_keeps_reduced_segments():
    layout = IterationLayout.initial(4, 4, 16)
    state = progressed(layout, layout.k)
    state.reduce_segment(0)
    lo, hi = state.segments()[0]
    frozen = state.reduced[lo:hi].copy()
    out = resume_scenario2(state, 1, 3)
    assert np.array_equal(out, failure_free_reference(layout))
    assert np.array_equal(out[lo:hi], frozen)


def test_scenario2_all_reduced():
    layout = IterationLayout.initial(2, 2, 4)
    state = progressed(layout, layout.k)
    state.reduce_segment(0)
    state.reduce_segment(1)
    assert np.array_equal(resume_scenario2(state, 0, 1), failure_free_reference(layout))


def test_segment_reduced_only_once():
    state = progressed(IterationLayout.initial(2, 2, 4), 2)
    state.reduce_segment(1)
    with pytest.raises(RuntimeError):
        state.reduce_segment(1)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.data())
def test_resumed_equals_reference(dp, pp, mult, data):
    layout = IterationLayout.initial(dp, pp, dp * mult, dims=16, iteration=data.draw(st.integers(0, 99)))
    rank = data.draw(st.integers(0, dp - 1))
    if data.draw(st.booleans()):
        point = FailurePoint(rank, after_mb=data.draw(st.integers(0, layout.k)))
    else:
        point = FailurePoint(rank, reduced_segments=data.draw(st.integers(0, pp)),
                             failed_stage=data.draw(st.integers(0, pp - 1)))
    ref, resumed = verify(layout, point)
    assert np.array_equal(resumed, ref)
    assert np.array_equal(ref, failure_free_reference(layout))


def _placement(prefix, n, pp=1, tp=1):
    return Placement(tuple(f"{prefix}{i}" for i in range(n)), n // (pp * tp), pp, tp)


def test_migration_prefers_healthy_replica():
    old = _placement("w", 4, pp=2)
    new = Placement(("w0", "w1", "x0", "x1"), 2, 2, 1)
    plan = plan_migration(old, new, {"w0", "w1", "x0", "x1"})
    assert set(plan.sources) == {"x0", "x1"}
    assert set(plan.sources.values()) == {StateSource.DP_REPLICA} and plan.cost == 10.0


def test_migration_falls_back_to_in_memory_then_remote():
    old = _placement("w", 2)
    new = _placement("x", 1)
    plan = plan_migration(old, new, {"x0"})
    assert plan.sources == {"x0": StateSource.IN_MEMORY} and plan.cost == 30.0
    plan = plan_migration(old, new, {"x0"}, {"in_memory": None, "remote": 1200.0})
    assert plan.sources == {"x0": StateSource.REMOTE} and plan.cost == 300.0
    with pytest.raises(UnrecoverableState):
        plan_migration(old, new, {"x0"}, {"in_memory": None, "remote": None})


def test_scale_out_replicates_from_existing_workers():
    old = _placement("w", 2)
    new = _placement("w", 4)
    plan = plan_migration(old, new, {"w0", "w1", "w2", "w3"})
    assert set(plan.sources) == {"w2", "w3"}
    assert all(s is StateSource.DP_REPLICA for s in plan.sources.values())


def test_migration_cost_is_max_not_sum():
    costs = {StateSource.DP_REPLICA: 10.0, StateSource.IN_MEMORY: 30.0, StateSource.REMOTE: 300.0}
    plan = plan_migration(None, _placement("x", 4), {"x0", "x1", "x2", "x3"}, costs=costs)
    assert len(plan.per_worker) == 4 and plan.cost == 30.0


def test_unchanged_placement_needs_nothing():
    p = _placement("w", 4, pp=2)
    plan = plan_migration(p, p, set(p.workers))
    assert plan.sources == {} and plan.cost == 0.0


def test_recomputation_examples():
    assert recomputation_cost(0.0, "restart") == 0.0
    assert recomputation_cost(1234.0, "restart") == 1234.0
    assert recomputation_cost(1234.0, "unicron", d_iter=60.0) == pytest.approx(34.0)
    with pytest.raises(ValueError):
        recomputation_cost(-1.0, "restart")
    with pytest.raises(ValueError):
        recomputation_cost(1.0, "unicron")


@given(st.floats(0, 1e6), st.floats(1, 600))
def test_in_place_recomputation_below_one_iteration(elapsed, d_iter):
    assert 0 <= recomputation_cost(elapsed, "unicron", d_iter) < d_iter
