"""Reference multi-task workloads: six concurrent tasks on a 128-worker cluster."""

from __future__ import annotations

from .domain import TaskSpec
from .synth import SynthModel, min_feasible_workers, synthesize_table

B = 1e9

# (model sizes, weights) per case, tasks t1..t6
CASES = {
    1: ((7 * B,) * 6, (1.0,) * 6),
    2: ((1.3 * B, 1.3 * B, 1.3 * B, 7 * B, 7 * B, 13 * B), (1.0,) * 6),
    3: ((7 * B,) * 6, (0.5, 0.8, 1.1, 1.4, 1.7, 2.0)),
    4: ((1.3 * B, 1.3 * B, 1.3 * B, 7 * B, 7 * B, 13 * B), (0.5, 0.8, 1.1, 1.4, 1.7, 2.0)),
    5: ((1.3 * B, 1.3 * B, 1.3 * B, 7 * B, 7 * B, 13 * B), (2.0, 1.7, 1.4, 1.1, 0.8, 0.5)),
}

CLUSTER_WORKERS = 128


def case_tasks(case: int, max_x: int = CLUSTER_WORKERS, model: SynthModel = SynthModel(),
               d_iter: float = 60.0, microbatches: int = 128) -> tuple[TaskSpec, ...]:
    """Tasks of one case with synthetic throughput tables up to ``max_x`` workers."""
    try:
        sizes, weights = CASES[case]
    except KeyError:
        raise ValueError(f"unknown case {case}; choose from {sorted(CASES)}") from None
    tasks = []
    for i, (size, weight) in enumerate(zip(sizes, weights), start=1):
        mw = min_feasible_workers(size, microbatches, model)
        bare = TaskSpec(f"t{i}", size, weight, mw, d_iter=d_iter, microbatches=microbatches)
        tasks.append(TaskSpec(f"t{i}", size, weight, mw, synthesize_table(bare, max_x, model),
                              d_iter=d_iter, microbatches=microbatches))
    return tuple(tasks)
