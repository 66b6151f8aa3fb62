"""Synthetic throughput tables for when no calibration measurements exist.

T(t, x) = peak * x * comm(x) * best layout efficiency, where the layout search
covers every (dp, pp, tp) with dp*pp*tp == x that fits the model in memory.
Counts with no feasible layout are left out of the table entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .domain import CalibrationPoint, TaskSpec, ThroughputTable


@dataclass(frozen=True)
class SynthModel:
    peak_flops: float = 312e12  # bf16 dense peak of one A800
    base_util: float = 0.55
    params_per_worker: float = 4.0e9  # weights + optimizer state that fit one 80GB card
    node_size: int = 8
    max_pp: int = 32
    tp_cost: float = 0.06  # per doubling of tp
    comm_decay: float = 0.06  # per doubling of x
    allreduce_ratio: float = 0.3  # gradient all-reduce time / one micro-batch of compute
    kernel_ref_size: float = 1.0e9  # models near this size underuse the tensor cores


def _divisors(n: int) -> list[int]:
    small = [d for d in range(1, int(math.isqrt(n)) + 1) if n % d == 0]
    return sorted(set(small + [n // d for d in small]))


def layout_efficiency(model_size: float, microbatches: int, dp: int, pp: int, tp: int,
                      model: SynthModel = SynthModel()) -> float:
    """Efficiency of one layout in [0, 1]; 0 when it does not fit in memory."""
    if model_size / (pp * tp) > model.params_per_worker or pp > model.max_pp or tp > model.node_size:
        return 0.0
    per_rank = math.ceil(microbatches / dp)
    balance = microbatches / (dp * per_rank)
    bubble = per_rank / (per_rank + pp - 1)
    allreduce = per_rank / (per_rank + model.allreduce_ratio) if dp > 1 else 1.0
    tp_eff = 1.0 / (1.0 + model.tp_cost * math.log2(tp))
    kernel = (model_size / (model_size + model.kernel_ref_size)) ** 0.3
    return balance * bubble * allreduce * tp_eff * kernel


def best_layout(model_size: float, microbatches: int, x: int,
                model: SynthModel = SynthModel()) -> tuple[float, tuple[int, int, int]] | None:
    top = None
    for tp in (1, 2, 4, 8, 16):
        if tp > model.node_size or x % tp:
            continue
        for pp in _divisors(x // tp):
            dp = x // (tp * pp)
            eff = layout_efficiency(model_size, microbatches, dp, pp, tp, model)
            # ties keep the first hit: smaller tp, then fewer stages
            if eff > 0 and (top is None or eff > top[0]):
                top = (eff, (dp, pp, tp))
    return top


def min_feasible_workers(model_size: float, microbatches: int = 128, model: SynthModel = SynthModel(),
                         limit: int = 4096) -> int:
    for x in range(1, limit + 1):
        if best_layout(model_size, microbatches, x, model) is not None:
            return x
    raise ValueError(f"no feasible layout up to {limit} workers")


def synthesize_table(t: TaskSpec, max_x: int, model: SynthModel = SynthModel()) -> ThroughputTable:
    if max_x < t.min_workers:
        raise ValueError("max_x must be >= min_workers")
    entries = {}
    for x in range(1, max_x + 1):
        found = best_layout(t.model_size, t.microbatches, x, model)
        if found is None:
            continue
        eff, (dp, pp, tp) = found
        comm = 1.0 / (1.0 + model.comm_decay * math.log2(x))
        entries[x] = CalibrationPoint(model.peak_flops * x * model.base_util * comm * eff, dp, pp, tp)
    return ThroughputTable(entries, t.min_workers)
