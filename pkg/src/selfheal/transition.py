"""Resuming a global-batch iteration after a worker failure, and migrating state.

The gradient engine is a toy: a micro-batch's gradient is an integer vector
derived from (iteration, micro-batch) alone, so any rank can recompute any
micro-batch and every sum is exact. That makes "resumed result equals the
failure-free result" a bitwise statement.
"""

from __future__ import annotations

import enum
import hashlib
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

DEFAULT_DIMS = 64
_MASK = (1 << 64) - 1
_VALUE_BITS = 20  # components lie in [-2**19, 2**19), sums stay far from int64 limits


class NoSurvivors(RuntimeError):
    """Only one DP rank existed; the task must restart from a checkpoint."""


class UnrecoverableState(RuntimeError):
    pass


def _splitmix64(z):
    """SplitMix64 finalizer on Python ints or uint64 arrays (wrapping arithmetic)."""
    if isinstance(z, np.ndarray):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


@lru_cache(maxsize=65536)
def _gradient(iteration: int, micro_batch: int, dims: int) -> np.ndarray:
    seed = _splitmix64(_splitmix64(iteration & _MASK) ^ (micro_batch & _MASK))
    lanes = _splitmix64(np.arange(dims, dtype=np.uint64))
    bits = _splitmix64(lanes ^ np.uint64(seed)) >> np.uint64(64 - _VALUE_BITS)
    out = bits.astype(np.int64) - (1 << (_VALUE_BITS - 1))
    out.flags.writeable = False
    return out


def micro_batch_gradient(iteration: int, micro_batch: int, dims: int = DEFAULT_DIMS) -> np.ndarray:
    """Deterministic integer gradient of one micro-batch; read-only array."""
    if dims < 1:
        raise ValueError("dims must be >= 1")
    return _gradient(int(iteration), int(micro_batch), int(dims))


def digest(vec: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(vec, dtype="<i8").tobytes()).hexdigest()[:16]


def segment_bounds(dims: int, pp: int) -> list[tuple[int, int]]:
    """Contiguous slices of the gradient vector, one per pipeline stage."""
    edges = np.linspace(0, dims, pp + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


@dataclass(frozen=True)
class IterationLayout:
    dp: int
    pp: int
    microbatches: int
    ownership: tuple[tuple[int, ...], ...]
    dims: int = DEFAULT_DIMS
    iteration: int = 0

    @classmethod
    def initial(cls, dp: int, pp: int, microbatches: int, dims: int = DEFAULT_DIMS,
                iteration: int = 0) -> IterationLayout:
        if dp < 1 or pp < 1:
            raise ValueError("dp and pp must be >= 1")
        if microbatches % dp:
            raise ValueError(f"{microbatches} micro-batches do not split over dp={dp}")
        k = microbatches // dp
        owned = tuple(tuple(range(r * k + 1, (r + 1) * k + 1)) for r in range(dp))
        return cls(dp, pp, microbatches, owned, dims, iteration)

    @property
    def k(self) -> int:
        return self.microbatches // self.dp

    def check(self) -> None:
        flat = sorted(mb for owned in self.ownership for mb in owned)
        if flat != list(range(1, self.microbatches + 1)):
            raise ValueError("ownership is not a disjoint cover of the global batch")


def run_iteration(layout: IterationLayout) -> np.ndarray:
    """Failure-free aggregate: accumulate per rank, then sum across ranks."""
    total = np.zeros(layout.dims, dtype=np.int64)
    for owned in layout.ownership:
        acc = np.zeros(layout.dims, dtype=np.int64)
        for mb in owned:
            acc += micro_batch_gradient(layout.iteration, mb, layout.dims)
        total += acc
    return total


def redistribute(layout: IterationLayout, failed_rank: int,
                 lost: Sequence[int] | None = None) -> dict[int, tuple[int, ...]]:
    """New ownership after dropping ``failed_rank``.

    The failed rank's micro-batches (or ``lost`` if given) are dealt one at a
    time, lowest id first, to the survivors in ascending rank order.
    """
    if layout.dp < 2:
        raise NoSurvivors("dp=1 leaves no surviving rank")
    if not 0 <= failed_rank < layout.dp:
        raise ValueError(f"rank {failed_rank} out of range for dp={layout.dp}")
    survivors = [r for r in range(layout.dp) if r != failed_rank]
    owned = {r: list(layout.ownership[r]) for r in survivors}
    dealt = sorted(layout.ownership[failed_rank] if lost is None else lost)
    for i, mb in enumerate(dealt):
        owned[survivors[i % len(survivors)]].append(mb)
    return {r: tuple(v) for r, v in owned.items()}


@dataclass
class GradientState:
    """Mid-iteration snapshot of every DP rank.

    ``accum[r]`` is rank r's running sum over the micro-batches in
    ``completed[r]``. ``reduced`` holds the all-reduced value of each segment
    whose flag in ``reduced_flags`` is set.
    """

    layout: IterationLayout
    accum: dict[int, np.ndarray]
    completed: dict[int, list[int]]
    reduced: np.ndarray
    reduced_flags: list[bool]

    @classmethod
    def start(cls, layout: IterationLayout) -> GradientState:
        return cls(
            layout,
            {r: np.zeros(layout.dims, dtype=np.int64) for r in range(layout.dp)},
            {r: [] for r in range(layout.dp)},
            np.zeros(layout.dims, dtype=np.int64),
            [False] * layout.pp,
        )

    def segments(self) -> list[tuple[int, int]]:
        return segment_bounds(self.layout.dims, self.layout.pp)

    def compute(self, rank: int, count: int | None = None) -> None:
        """Run the next ``count`` (default: all remaining) owned micro-batches on ``rank``."""
        todo = [mb for mb in self.layout.ownership[rank] if mb not in self.completed[rank]]
        for mb in todo if count is None else todo[:count]:
            self.accum[rank] += micro_batch_gradient(self.layout.iteration, mb, self.layout.dims)
            self.completed[rank].append(mb)

    def all_done(self) -> bool:
        return all(len(self.completed[r]) == len(self.layout.ownership[r]) for r in range(self.layout.dp))

    def reduce_segment(self, stage: int, ranks: Sequence[int] | None = None) -> None:
        if self.reduced_flags[stage]:
            raise RuntimeError(f"segment {stage} already reduced")
        lo, hi = self.segments()[stage]
        ranks = range(self.layout.dp) if ranks is None else ranks
        self.reduced[lo:hi] = sum((self.accum[r][lo:hi] for r in ranks), np.zeros(hi - lo, dtype=np.int64))
        self.reduced_flags[stage] = True

    def result(self) -> np.ndarray:
        if not all(self.reduced_flags):
            raise RuntimeError("iteration not fully reduced")
        return self.reduced.copy()


def progressed(layout: IterationLayout, steps: int | Sequence[int]) -> GradientState:
    """State after each rank finished ``steps`` (or ``steps[r]``) of its micro-batches."""
    state = GradientState.start(layout)
    for r in range(layout.dp):
        state.compute(r, steps if isinstance(steps, int) else steps[r])
    return state


def _resume_with_redistribution(state: GradientState, failed_rank: int) -> np.ndarray:
    layout = state.layout
    new_owned = redistribute(layout, failed_rank)
    survivors = sorted(new_owned)
    segs = state.segments()
    pending = [s for s in range(layout.pp) if not state.reduced_flags[s]]
    for r in survivors:
        for mb in new_owned[r]:
            if mb in state.completed[r]:
                continue
            g = micro_batch_gradient(layout.iteration, mb, layout.dims)
            # reduced segments are final; only pending ones take new contributions
            for s in pending:
                lo, hi = segs[s]
                state.accum[r][lo:hi] += g[lo:hi]
            state.completed[r].append(mb)
    state.completed.pop(failed_rank, None)
    state.accum.pop(failed_rank, None)
    for s in pending:
        state.reduce_segment(s, survivors)
    return state.result()


def resume_scenario1(state: GradientState, failed_rank: int) -> np.ndarray:
    """Failure before any segment was reduced.

    Pause, rebuild the communicator over the survivors, deal the failed
    rank's micro-batches out round-robin, finish, then all-reduce.
    """
    if any(state.reduced_flags):
        raise ValueError("all-reduce already started; use resume_scenario2")
    if state.layout.dp < 2:
        raise NoSurvivors("dp=1: fall back to checkpoint restart")
    return _resume_with_redistribution(state, failed_rank)


def resume_scenario2(state: GradientState, failed_rank: int, failed_stage: int) -> np.ndarray:
    """Failure of worker (rank, stage) after accumulation, during the all-reduce."""
    layout = state.layout
    if not state.all_done():
        raise ValueError("all-reduce cannot start before every rank finished accumulating")
    if not 0 <= failed_stage < layout.pp:
        raise ValueError(f"stage {failed_stage} out of range for pp={layout.pp}")
    if state.reduced_flags[failed_stage]:
        # the lost worker's share is already inside the reduced segment and the
        # rank's other stages still hold theirs
        for s in range(layout.pp):
            if not state.reduced_flags[s]:
                state.reduce_segment(s)
        return state.result()
    if layout.dp < 2:
        raise NoSurvivors("dp=1: fall back to checkpoint restart")
    return _resume_with_redistribution(state, failed_rank)


def failure_free_reference(layout: IterationLayout) -> np.ndarray:
    """Independent oracle: plain sum over micro-batch ids 1..B."""
    total = np.zeros(layout.dims, dtype=np.int64)
    for mb in range(1, layout.microbatches + 1):
        total += micro_batch_gradient(layout.iteration, mb, layout.dims)
    return total


@dataclass(frozen=True)
class FailurePoint:
    failed_rank: int
    after_mb: int | None = None  # scenario 1: micro-batches finished per rank
    reduced_segments: int | None = None  # scenario 2: segments reduced before the failure
    failed_stage: int = 0


def verify(layout: IterationLayout, point: FailurePoint) -> tuple[np.ndarray, np.ndarray]:
    """Run one failure point; returns (reference, resumed)."""
    reference = run_iteration(layout)
    if point.reduced_segments is None:
        state = progressed(layout, point.after_mb or 0)
        resumed = resume_scenario1(state, point.failed_rank)
    else:
        state = progressed(layout, layout.k)
        for s in range(point.reduced_segments):
            state.reduce_segment(s)
        resumed = resume_scenario2(state, point.failed_rank, point.failed_stage)
    return reference, resumed


def sweep_points(layout: IterationLayout):
    for rank in range(layout.dp):
        for after in range(layout.k + 1):
            yield FailurePoint(rank, after_mb=after)
        for reduced in range(layout.pp + 1):
            for stage in range(layout.pp):
                yield FailurePoint(rank, reduced_segments=reduced, failed_stage=stage)


# -- state migration ---------------------------------------------------------

class StateSource(str, enum.Enum):
    DP_REPLICA = "dp_replica"
    IN_MEMORY = "in_memory_checkpoint"
    REMOTE = "remote_checkpoint"


DEFAULT_SOURCE_COST = {
    StateSource.DP_REPLICA: 10.0,
    StateSource.IN_MEMORY: 30.0,
    StateSource.REMOTE: 300.0,
}


@dataclass(frozen=True)
class Placement:
    """Workers of one task in rank order, with the layout they form."""

    workers: tuple[str, ...]
    dp: int
    pp: int
    tp: int

    def position(self, i: int) -> tuple[int, int]:
        """(stage, tensor shard) held by the i-th worker."""
        return ((i // self.tp) % self.pp, i % self.tp)

    def positions(self) -> dict[str, tuple[int, int]]:
        return {w: self.position(i) for i, w in enumerate(self.workers)}


@dataclass(frozen=True)
class MigrationPlan:
    sources: Mapping[str, StateSource]
    cost: float
    per_worker: Mapping[str, float] = field(default_factory=dict)


def plan_migration(
    old: Placement | None,
    new: Placement,
    healthy: set[str] | frozenset[str],
    checkpoint_ages: Mapping[str, float | None] | None = None,
    costs: Mapping[StateSource, float] = DEFAULT_SOURCE_COST,
) -> MigrationPlan:
    """Pick the nearest state source for every worker of ``new`` that needs state.

    Healthy old workers together hold a full replica when every (stage, shard)
    of the old layout has a surviving holder; any new worker can copy from
    them. Otherwise the in-memory checkpoint is used, then remote storage.
    ``checkpoint_ages`` maps "in_memory"/"remote" to the checkpoint age in
    seconds, or None when that tier has nothing.
    """
    ages = {"in_memory": 0.0, "remote": 0.0} if checkpoint_ages is None else checkpoint_ages
    same_layout = old is not None and (old.pp, old.tp) == (new.pp, new.tp)
    old_pos = old.positions() if old is not None else {}
    needs = [
        w for w, pos in new.positions().items()
        if w not in healthy or not same_layout or old_pos.get(w) != pos
    ]
    if not needs:
        return MigrationPlan({}, 0.0, {})
    covered = False
    if old is not None:
        held = {pos for w, pos in old_pos.items() if w in healthy}
        covered = held == {old.position(i) for i in range(len(old.workers))}
    if covered:
        source = StateSource.DP_REPLICA
    elif ages.get("in_memory") is not None:
        source = StateSource.IN_MEMORY
    elif ages.get("remote") is not None:
        source = StateSource.REMOTE
    else:
        raise UnrecoverableState("no replica or checkpoint holds the task state")
    per_worker = {w: float(costs[source]) for w in needs}
    # requests go out in parallel, so the slowest one bounds the transition
    return MigrationPlan({w: source for w in needs}, max(per_worker.values()), per_worker)


def recomputation_cost(elapsed: float, policy: str, d_iter: float | None = None) -> float:
    """Work redone after a failure ``elapsed`` seconds past the last checkpoint.

    A checkpoint restart replays everything since the checkpoint. Resuming
    the failed iteration in place only redoes the partial iteration.
    """
    if elapsed < 0:
        raise ValueError("elapsed must be >= 0")
    if policy == "restart":
        return elapsed
    if policy == "unicron":
        if d_iter is None:
            raise ValueError("in-place resumption needs d_iter")
        return elapsed % d_iter
    raise ValueError(f"unknown recomputation policy {policy!r}")
