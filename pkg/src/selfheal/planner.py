"""Reconfiguration plan generation.

Each task's reward for a candidate worker count is its WAF over the expected
run time until the next failure, minus the WAF its current allocation loses
while a transition is in progress. A knapsack-style dynamic program over
tasks and workers picks the allocation with the highest total reward.

Rewards are rounded to whole FLOPs before they enter the DP so that the DP
and the exhaustive oracle compare integers and agree on ties exactly.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Hashable, Iterable, Mapping, Sequence

from .domain import (
    ClusterState,
    CostParams,
    Health,
    Plan,
    TaskPlan,
    TaskSpec,
    split_microbatches,
    table_lookup,
)

BRUTE_FORCE_MAX_TASKS = 6
BRUTE_FORCE_MAX_WORKERS = 24


class InstanceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class RewardInputs:
    tasks: tuple[TaskSpec, ...]
    current: Mapping[str, int]
    faulted: frozenset[str]
    capacity: int
    cost: CostParams

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(sorted(self.tasks, key=lambda t: t.task_id)))
        object.__setattr__(self, "current", MappingProxyType(dict(self.current)))
        object.__setattr__(self, "faulted", frozenset(self.faulted))
        if self.capacity < 0:
            raise ValueError("capacity must be >= 0")
        ids = {t.task_id for t in self.tasks}
        if not self.faulted <= ids:
            raise ValueError(f"faulted tasks not in task set: {sorted(self.faulted - ids)}")

    def x(self, task_id: str) -> int:
        return self.current.get(task_id, 0)


def waf(t: TaskSpec, x: int) -> float:
    if x < t.min_workers:
        return 0.0
    return t.weight * table_lookup(t.calibration, x)


def expected_run_duration(n: int, cost: CostParams) -> float:
    if n <= 0:
        return cost.horizon
    return min(cost.horizon, 1.0 / (n * cost.lambda_worker))


def reward(t: TaskSpec, x: int, x_new: int, n: int, faulted: bool, cost: CostParams) -> float:
    gain = waf(t, x_new) * expected_run_duration(n, cost)
    if x_new != x or faulted:
        return gain - waf(t, x) * cost.d_transition
    return gain


def _candidates(t: TaskSpec, limit: int) -> list[int]:
    return [0] + [k for k in t.calibration.points() if k <= limit]


def _rewards(inputs: RewardInputs, t: TaskSpec) -> dict[int, int]:
    x = inputs.x(t.task_id)
    faulted = t.task_id in inputs.faulted
    return {
        k: round(reward(t, x, k, inputs.capacity, faulted, inputs.cost))
        for k in _candidates(t, inputs.capacity)
    }


def _preference(k: int, current: int) -> tuple[bool, int]:
    # stay put first, then fewer workers
    return (k != current, k)


def _make_plan(tasks: Sequence[TaskSpec], choice: Mapping[str, int], objective: int) -> Plan:
    rows = []
    for t in tasks:
        k = choice[t.task_id]
        if k == 0:
            rows.append(TaskPlan(t.task_id, 0))
            continue
        dp, pp, tp = t.calibration.layout(k)
        rows.append(TaskPlan(t.task_id, k, dp, pp, tp, split_microbatches(t.microbatches, dp)))
    return Plan(tuple(rows), objective)


def solve(inputs: RewardInputs) -> Plan:
    """Optimal allocation by dynamic programming over (task, workers).

    Tasks are folded in reverse id order so the traceback settles the first
    task first; among equal-reward choices it keeps the current count, then
    picks the smaller one.
    """
    if not inputs.tasks:
        return Plan((), 0)
    n = inputs.capacity
    order = list(reversed(inputs.tasks))
    best = [0] * (n + 1)
    choices: list[list[int]] = []
    for t in order:
        g = _rewards(inputs, t)
        cands = sorted(g)
        cur = inputs.x(t.task_id)
        prefs = {k: _preference(k, cur) for k in cands}
        row_val = [0] * (n + 1)
        row_k = [0] * (n + 1)
        for j in range(n + 1):
            top_v, top_k = None, 0
            for k in cands:
                if k > j:
                    break
                v = best[j - k] + g[k]
                if top_v is None or v > top_v or (v == top_v and prefs[k] < prefs[top_k]):
                    top_v, top_k = v, k
            row_val[j] = top_v
            row_k[j] = top_k
        best = row_val
        choices.append(row_k)

    assignment = {}
    j = n
    for t, row_k in zip(reversed(order), reversed(choices)):
        k = row_k[j]
        assignment[t.task_id] = k
        j -= k
    return _make_plan(inputs.tasks, assignment, best[n])


def brute_force_solve(inputs: RewardInputs) -> Plan:
    """Exhaustive search over every allocation that fits; the DP's oracle."""
    m, n = len(inputs.tasks), inputs.capacity
    if m > BRUTE_FORCE_MAX_TASKS or n > BRUTE_FORCE_MAX_WORKERS:
        raise InstanceTooLarge(f"brute force limited to m<={BRUTE_FORCE_MAX_TASKS}, n'<={BRUTE_FORCE_MAX_WORKERS}")
    if m == 0:
        return Plan((), 0)
    tasks = inputs.tasks
    rewards = [_rewards(inputs, t) for t in tasks]
    currents = [inputs.x(t.task_id) for t in tasks]

    best_key = None
    best_assign: tuple[int, ...] = ()

    def walk(i: int, left: int, picked: list[int], total: int):
        nonlocal best_key, best_assign
        if i == m:
            key = (-total, tuple(_preference(k, c) for k, c in zip(picked, currents)))
            if best_key is None or key < best_key:
                best_key, best_assign = key, tuple(picked)
            return
        for k, g in rewards[i].items():
            if k <= left:
                picked.append(k)
                walk(i + 1, left - k, picked, total + g)
                picked.pop()

    walk(0, n, [], 0)
    choice = {t.task_id: k for t, k in zip(tasks, best_assign)}
    return _make_plan(tasks, choice, -best_key[0])


def plan_waf(tasks: Iterable[TaskSpec], plan: Plan) -> float:
    return sum(waf(t, plan.x(t.task_id)) for t in tasks)


# -- lookup table ------------------------------------------------------------

@dataclass(frozen=True)
class LookupTable:
    """Plans solved ahead of time for one-step perturbations of the current state.

    Keys: ``("fault", node_id)``, ``("join", node_id)`` for a down node coming
    back, ``("join", None)`` for one brand-new node, ``("finish", task_id)``.
    """

    entries: Mapping[Hashable, Plan] = field(default_factory=dict)
    perturbed: Mapping[Hashable, RewardInputs] = field(default_factory=dict, repr=False)

    def get(self, key: Hashable) -> Plan | None:
        return self.entries.get(key)

    def __len__(self):
        return len(self.entries)


def perturbations(inputs: RewardInputs, cluster: ClusterState,
                  node_size: int | None = None) -> dict[Hashable, RewardInputs]:
    out: dict[Hashable, RewardInputs] = {}
    for node in cluster.nodes:
        if node.health is Health.HEALTHY:
            hit = frozenset(cluster.tasks_on_node(node.node_id)) & {t.task_id for t in inputs.tasks}
            out[("fault", node.node_id)] = replace(
                inputs,
                capacity=max(0, inputs.capacity - len(node.worker_ids)),
                faulted=inputs.faulted | hit,
            )
        else:
            out[("join", node.node_id)] = replace(inputs, capacity=inputs.capacity + len(node.worker_ids))
    if node_size is None:
        node_size = len(cluster.nodes[0].worker_ids) if cluster.nodes else 8
    out[("join", None)] = replace(inputs, capacity=inputs.capacity + node_size)
    for t in inputs.tasks:
        rest = tuple(o for o in inputs.tasks if o.task_id != t.task_id)
        out[("finish", t.task_id)] = replace(
            inputs,
            tasks=rest,
            current={k: v for k, v in inputs.current.items() if k != t.task_id},
            faulted=inputs.faulted - {t.task_id},
        )
    return out


def precompute_lookup(inputs: RewardInputs, cluster: ClusterState, workers: int = 1) -> LookupTable:
    cases = perturbations(inputs, cluster)
    keys = list(cases)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            plans = list(pool.map(solve, (cases[k] for k in keys)))
    else:
        plans = [solve(cases[k]) for k in keys]
    return LookupTable(MappingProxyType(dict(zip(keys, plans))), MappingProxyType(cases))


# -- static multi-task baselines ---------------------------------------------

STATIC_MODES = ("equally", "weighted", "sized")


def static_allocation(tasks: Sequence[TaskSpec], n: int, mode: str) -> Plan:
    """Fixed shares: equal, proportional to weight, or proportional to model size.

    Each share is rounded down to the nearest calibrated point the task can run
    at; a task whose share is below its minimum gets nothing.
    """
    tasks = sorted(tasks, key=lambda t: t.task_id)
    if mode == "equally":
        basis = [1.0] * len(tasks)
    elif mode == "weighted":
        basis = [t.weight for t in tasks]
    elif mode == "sized":
        basis = [t.model_size for t in tasks]
    else:
        raise ValueError(f"unknown static mode {mode!r}")
    total = sum(basis)
    choice = {}
    for t, b in zip(tasks, basis):
        share = int(n * b / total) if total > 0 else 0
        fits = [k for k in t.calibration.points() if k <= share]
        choice[t.task_id] = max(fits) if fits else 0
    return _make_plan(tasks, choice, 0)
