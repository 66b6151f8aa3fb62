"""Discrete-event cluster simulator.

Replays a failure trace against a multi-task cluster under one recovery
policy and integrates the cluster WAF over time. Every task's WAF is
piecewise constant between events, so accumulated WAF is summed exactly
from interval boundaries; the optional fixed-period samples only add rows
to the output.

Policies:

unicron
    in-band detection, in-place reattempt/restart, and cluster-wide
    re-planning on node loss and node return.
restart_checkpoint
    a failed task hangs until the collective timeout, is resubmitted, reloads
    the remote checkpoint and replays the work since it. After a node loss
    the task waits until enough healthy workers are free again.
affected_task_only
    the same recovery machinery as unicron, but only the task that lost
    workers is reconfigured; returning workers go to the earliest-hit task.
static_equally / static_weighted / static_sized
    fixed shares of the cluster with restart_checkpoint recovery.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence, TextIO

import numpy as np

from .config import RunConfig
from .detection import LATENCY, statistical_latency
from .domain import ErrorEvent, Health, Plan, Severity, Source, TaskSpec, source_of
from .planner import RewardInputs, solve, static_allocation, waf
from .recovery import ActionKind, decide, escalate
from .traces import FailureTrace, TraceEvent
from .transition import Placement, StateSource, plan_migration, recomputation_cost

POLICIES = ("unicron", "restart_checkpoint", "affected_task_only",
            "static_equally", "static_weighted", "static_sized")

METRICS_HEADER = ("time_s", "task_id", "waf", "cluster_waf", "accumulated_waf")

# same-instant ordering: resumes settle before new failures are handled
_RESUME, _REPAIR, _FAULT, _DETECT, _TICK = range(5)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicyParams:
    relaunch_s: float = 30.0  # tear down and relaunch a reconfigured task
    restart_process_s: float = 30.0  # in-place restart of the training processes
    reattempt_backoff_s: float = 1.0
    reattempt_fail_prob: float = 0.0
    restart_fail_prob: float = 0.0
    escalated_repair_s: float = 86400.0  # a node drained by escalation returns after this long
    collective_timeout_s: float = 1800.0
    baseline_node_detect_s: float = 5.7
    resubmit_s: float = 9 * 60.0
    env_setup_s: float = 14 * 60.0
    hot_spare: bool = False
    zero_cost: bool = False
    source_cost: Mapping[str, float] = field(default_factory=lambda: {s.value: c for s, c in _SOURCE_COST.items()})

    @classmethod
    def from_mapping(cls, raw: Mapping) -> PolicyParams:
        names = {f for f in cls.__dataclass_fields__}
        bad = set(raw) - names
        if bad:
            raise ValueError(f"policy: unknown parameter(s) {sorted(bad)}")
        return cls(**raw)

    def cost_of(self, source: StateSource) -> float:
        return 0.0 if self.zero_cost else float(self.source_cost[source.value])


_SOURCE_COST = {StateSource.DP_REPLICA: 10.0, StateSource.IN_MEMORY: 30.0, StateSource.REMOTE: 300.0}


@dataclass
class MetricsSeries:
    task_ids: tuple[str, ...]
    times: list[float] = field(default_factory=list)
    task_waf: list[tuple[float, ...]] = field(default_factory=list)
    cluster_waf: list[float] = field(default_factory=list)
    accumulated: list[float] = field(default_factory=list)
    downtime: dict[str, float] = field(default_factory=dict)
    failures: dict[str, int] = field(default_factory=dict)
    policy: str = ""
    horizon: float = 0.0

    @property
    def accumulated_waf(self) -> float:
        return self.accumulated[-1] if self.accumulated else 0.0

    def add(self, t: float, wafs: Sequence[float], acc: float) -> None:
        row = tuple(float(w) for w in wafs)
        if self.times and self.times[-1] == t:
            self.task_waf[-1], self.cluster_waf[-1], self.accumulated[-1] = row, math.fsum(row), acc
            return
        self.times.append(t)
        self.task_waf.append(row)
        self.cluster_waf.append(math.fsum(row))
        self.accumulated.append(acc)

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "horizon": self.horizon,
            "accumulated_waf": self.accumulated_waf,
            "failures": dict(self.failures),
            "downtime_s": {k: self.downtime[k] for k in sorted(self.downtime)},
        }

    def write_csv(self, dest: str | os.PathLike | TextIO) -> None:
        if isinstance(dest, (str, os.PathLike)):
            tmp = Path(f"{os.fspath(dest)}.tmp")
            with open(tmp, "w", newline="") as fh:
                self.write_csv(fh)
            os.replace(tmp, dest)
            return
        w = csv.writer(dest, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for t, row, cw, acc in zip(self.times, self.task_waf, self.cluster_waf, self.accumulated):
            for tid, v in zip(self.task_ids, row):
                w.writerow([repr(t), tid, repr(v), repr(cw), repr(acc)])


@dataclass
class _Task:
    spec: TaskSpec
    workers: tuple[str, ...] = ()
    layout: tuple[int, int, int] = (0, 0, 0)
    running: bool = False
    token: int = 0
    fail_time: float | None = None
    target_x: int = 0  # allocation the restart-style baselines restore

    @property
    def x(self) -> int:
        return len(self.workers)

    def placement(self) -> Placement:
        dp, pp, tp = self.layout
        return Placement(self.workers, dp, pp, tp)


def initial_plan(config: RunConfig, policy: str, horizon: float | None = None) -> Plan:
    """Every policy but the static ones starts from the optimal plan on a healthy cluster."""
    if policy.startswith("static_"):
        return static_allocation(config.tasks, config.cluster.capacity, policy[len("static_"):])
    cost = config.cost if horizon is None else replace(config.cost, horizon=horizon)
    inputs = RewardInputs(config.tasks, {}, frozenset(), config.cluster.capacity, cost)
    return solve(inputs)


def _detect_latency(status: str | None, severity: Severity, task: TaskSpec) -> float:
    if severity is Severity.SEV1:
        return LATENCY[Source.NODE_HEALTH]
    if status is None:
        status = "Exited abnormally" if severity is Severity.SEV2 else "Connection refused/reset"
    src = source_of(status)
    if src is Source.STATISTICAL_MONITORING:
        return statistical_latency(task.d_iter)
    return LATENCY[src]


class _Run:
    def __init__(self, config: RunConfig, trace: FailureTrace, policy: str, params: PolicyParams,
                 sample_every: float | None, log: TextIO | None, seed: int | None = None):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}; choose from {list(POLICIES)}")
        self.config = config
        self.trace = trace
        self.policy = policy
        self.params = params
        self.horizon = trace.horizon
        self.log = log
        self.cluster = config.cluster.with_assignment({})
        self.tasks = {t.task_id: _Task(t) for t in sorted(config.tasks, key=lambda t: t.task_id)}
        self.ids = tuple(self.tasks)
        self.now = 0.0
        self.acc = 0.0
        self.heap: list = []
        self.seq = 0
        self.waiting: deque[str] = deque()  # restart-style tasks waiting for workers, FIFO
        self.deficit: deque[str] = deque()  # affected_task_only tasks below their original size
        self.pending_detect: set[str] = set()
        self.rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed if seed is not None else (trace.seed or 0))))
        self.metrics = MetricsSeries(self.ids, policy=policy, horizon=self.horizon)
        self.metrics.downtime = {tid: 0.0 for tid in self.ids}
        self.metrics.failures = {"sev1": 0, "sev2": 0, "sev3": 0, "repair": 0, "ignored": 0, "escalated": 0}
        self.sample_every = sample_every
        self.cost = config.cost
        if params.zero_cost:
            self.cost = replace(config.cost, d_transition=0.0)

    # -- bookkeeping -----------------------------------------------------

    def push(self, t: float, prio: int, kind: str, payload=None) -> None:
        heapq.heappush(self.heap, (t, prio, self.seq, kind, payload))
        self.seq += 1

    def rates(self) -> list[float]:
        return [waf(tk.spec, tk.x) if tk.running else 0.0 for tk in self.tasks.values()]

    def advance(self, t: float) -> None:
        dt = t - self.now
        if dt < 0:
            raise SimulationError("time went backwards")
        if dt > 0:
            rates = self.rates()
            self.acc += math.fsum(rates) * dt
            for tid, r in zip(self.ids, rates):
                if r == 0.0:
                    self.metrics.downtime[tid] += dt
            self.now = t

    def sample(self) -> None:
        self.metrics.add(self.now, self.rates(), self.acc)

    def audit(self, event: dict, action: str, outcome: str) -> None:
        if self.log is not None:
            self.log.write(json.dumps({"t": self.now, "event": event, "action": action, "outcome": outcome},
                                      sort_keys=True) + "\n")

    def d(self, seconds: float) -> float:
        return 0.0 if self.params.zero_cost else seconds

    def stop(self, tid: str) -> None:
        tk = self.tasks[tid]
        tk.running = False
        tk.token += 1

    def resume_after(self, tid: str, delay: float) -> None:
        tk = self.tasks[tid]
        tk.running = False
        tk.token += 1
        if tk.x == 0:
            return
        if delay <= 0:
            tk.running = True
            tk.fail_time = None
            return
        self.push(self.now + delay, _RESUME, "resume", (tid, tk.token))

    def owner(self, worker: str) -> str | None:
        for tid, tk in self.tasks.items():
            if worker in tk.workers:
                return tid
        return None

    def healthy(self) -> list[str]:
        return self.cluster.healthy_workers()

    def free(self) -> list[str]:
        used = {w for tk in self.tasks.values() for w in tk.workers}
        return [w for w in self.healthy() if w not in used]

    def recompute(self, tid: str, policy: str) -> float:
        tk = self.tasks[tid]
        if tk.fail_time is None or self.params.zero_cost:
            return 0.0
        elapsed = tk.fail_time % self.cost.checkpoint_interval
        return recomputation_cost(elapsed, policy, tk.spec.d_iter)

    def set_workers(self, tid: str, workers: Sequence[str]) -> None:
        tk = self.tasks[tid]
        tk.workers = tuple(workers)
        if not workers:
            tk.layout = (0, 0, 0)
        elif len(workers) in tk.spec.calibration.entries:
            tk.layout = tk.spec.calibration.layout(len(workers))
        # otherwise the survivors of a lost node keep their old layout until the task is resized

    # -- placement -------------------------------------------------------

    def place(self, counts: Mapping[str, int]) -> dict[str, tuple[str, ...]]:
        """Deterministic worker choice: keep healthy current workers, fill from the free pool."""
        healthy = set(self.healthy())
        order = sorted(counts, key=lambda t: (-counts[t], t))
        keep = {}
        for tid in order:
            mine = [w for w in self.tasks[tid].workers if w in healthy]
            keep[tid] = mine[:counts[tid]]
        used = {w for ws in keep.values() for w in ws}
        pool = deque(w for w in self.healthy() if w not in used)
        out = {}
        for tid in order:
            need = counts[tid] - len(keep[tid])
            if need > len(pool):
                raise SimulationError(f"placement needs {need} workers for {tid}, {len(pool)} free")
            out[tid] = tuple(keep[tid]) + tuple(pool.popleft() for _ in range(need))
        return out

    def transition(self, tid: str, workers: tuple[str, ...], recompute_policy: str | None) -> None:
        """Move ``tid`` onto ``workers`` and schedule its resumption."""
        tk = self.tasks[tid]
        old = tk.placement() if tk.workers else None
        self.set_workers(tid, workers)
        if not workers:
            self.stop(tid)
            return
        healthy = frozenset(self.healthy())
        mig = plan_migration(old, tk.placement(), healthy)
        migration = max((self.params.cost_of(s) for s in mig.sources.values()), default=0.0)
        delay = self.d(self.params.relaunch_s) + migration
        if recompute_policy is not None:
            delay += self.recompute(tid, recompute_policy)
        self.resume_after(tid, delay)

    # -- planning (unicron) ----------------------------------------------

    def replan(self, faulted: frozenset[str]) -> None:
        remaining = max(self.horizon - self.now, 1.0)
        cost = replace(self.cost, horizon=remaining)
        current = {tid: tk.x for tid, tk in self.tasks.items()}
        # a task that lost workers is still charged for the allocation it had
        for tid in faulted:
            current[tid] = max(current[tid], self.tasks[tid].target_x)
        inputs = RewardInputs(tuple(tk.spec for tk in self.tasks.values()), current, faulted,
                              len(self.healthy()), cost)
        plan = solve(inputs)
        counts = plan.assignment()
        placed = self.place(counts)
        for tid in self.ids:
            tk = self.tasks[tid]
            new = placed[tid]
            changed = new != tk.workers or tid in faulted
            if changed:
                self.transition(tid, new, "unicron" if tid in faulted else None)
            tk.target_x = len(new)
        self.audit({"replan": sorted(faulted)}, ActionKind.RECONFIGURE_CLUSTER.value,
                   json.dumps(counts, sort_keys=True))

    # -- event handlers --------------------------------------------------

    def on_node_fault(self, node_id: str) -> bool:
        if self.cluster.node(node_id).health is not Health.HEALTHY:
            self.metrics.failures["ignored"] += 1
            return False
        self.metrics.failures["sev1"] += 1
        self.cluster = self.cluster.with_health(node_id, Health.LOST)
        members = set(self.cluster.node(node_id).worker_ids)
        for tid, tk in self.tasks.items():
            if members.intersection(tk.workers):
                if tk.fail_time is None:
                    tk.fail_time = self.now
                self.stop(tid)
        self.pending_detect.add(node_id)
        restart_style = self.policy == "restart_checkpoint" or self.policy.startswith("static_")
        latency = self.params.baseline_node_detect_s if restart_style else LATENCY[Source.NODE_HEALTH]
        self.push(self.now + self.d(latency), _DETECT, "node_detected", node_id)
        return True

    def on_nodes_detected(self, node_ids: list[str]) -> None:
        hit: set[str] = set()
        for node_id in node_ids:
            self.pending_detect.discard(node_id)
            self.cluster = self.cluster.with_health(node_id, Health.DRAINED)
            members = set(self.cluster.node(node_id).worker_ids)
            ev = ErrorEvent.make(self.now, Source.NODE_HEALTH, "Lost connection", node_id)
            self.audit(ev.to_dict(), decide(ev).kind.value, "drained")
            for tid, tk in self.tasks.items():
                if members.intersection(tk.workers):
                    hit.add(tid)
                    if tk.target_x == 0:
                        tk.target_x = tk.x
                    self.set_workers(tid, [w for w in tk.workers if w not in members])
        if self.policy == "unicron":
            self.replan(frozenset(hit))
        elif self.policy == "affected_task_only":
            for tid in sorted(hit, key=lambda t: (self.tasks[t].fail_time, t)):
                self.shrink_affected(tid)
        else:
            if self.params.hot_spare:
                spares = len(node_ids)
                self.cluster = self.cluster.add_nodes(spares, len(self.cluster.node(node_ids[0]).worker_ids))
            for tid in sorted(hit, key=lambda t: (self.tasks[t].fail_time, t)):
                if tid not in self.waiting:
                    self.waiting.append(tid)
            self.serve_waiting()

    def on_repair(self, node_id: str) -> None:
        node = self.cluster.node(node_id)
        if node_id in self.pending_detect:
            # the loss has not been noticed yet; the node returns right after it is
            self.push(self.now, _DETECT + 1, "repair", node_id)
            return
        if node.health is Health.HEALTHY:
            self.metrics.failures["ignored"] += 1
            return
        self.metrics.failures["repair"] += 1
        self.cluster = self.cluster.with_health(node_id, Health.HEALTHY)
        self.audit({"trigger": "node_join", "subject": node_id}, ActionKind.RECONFIGURE_CLUSTER.value, "requested")
        if self.policy == "unicron":
            self.replan(frozenset())
        elif self.policy == "affected_task_only":
            self.grow_affected()
        else:
            self.serve_waiting()

    def on_worker_error(self, ev: TraceEvent, severity: Severity) -> None:
        try:
            node_id = self.cluster.node_of(ev.subject)
        except KeyError:
            raise SimulationError(f"trace names unknown worker {ev.subject}") from None
        tid = self.owner(ev.subject)
        if self.cluster.node(node_id).health is not Health.HEALTHY or tid is None or not self.tasks[tid].running:
            self.metrics.failures["ignored"] += 1
            return
        self.metrics.failures[severity.label] += 1
        tk = self.tasks[tid]
        tk.fail_time = self.now
        status = ev.status or ("Exited abnormally" if severity is Severity.SEV2 else "Connection refused/reset")
        event = ErrorEvent(self.now, source_of(status), status, ev.subject, severity)
        if self.policy in ("unicron", "affected_task_only"):
            self.recover_in_band(tid, event)
        else:
            self.restart_from_checkpoint(tid, event)

    def recover_in_band(self, tid: str, event: ErrorEvent) -> None:
        tk = self.tasks[tid]
        t = self.d(_detect_latency(event.status_kind, event.severity, tk.spec))
        while True:
            action = decide(event)
            if action.kind is ActionKind.REATTEMPT_IN_PLACE:
                t += self.d(self.params.reattempt_backoff_s)
                ok = self.rng.random() >= self.params.reattempt_fail_prob
                if ok:
                    self.audit(event.to_dict(), action.kind.value, "success")
                    self.stop(tid)
                    self.resume_after(tid, t)
                    return
            else:
                t += self.d(self.params.restart_process_s)
                ok = self.rng.random() >= self.params.restart_fail_prob
                if ok:
                    healthy = frozenset(self.healthy()) - {event.subject}
                    mig = plan_migration(tk.placement(), tk.placement(), healthy)
                    t += max((self.params.cost_of(s) for s in mig.sources.values()), default=0.0)
                    t += self.recompute(tid, "unicron")
                    self.audit(event.to_dict(), action.kind.value, "success")
                    self.stop(tid)
                    self.resume_after(tid, t)
                    return
            self.audit(event.to_dict(), action.kind.value, "failure")
            self.metrics.failures["escalated"] += 1
            event = escalate(event)
            if event.severity is Severity.SEV1:
                self.stop(tid)
                node_id = self.cluster.node_of(event.subject)
                self.push(self.now + t, _FAULT, "escalated_fault", node_id)
                return

    def restart_from_checkpoint(self, tid: str, event: ErrorEvent) -> None:
        p = self.params
        self.audit(event.to_dict(), "restart_from_checkpoint", "success")
        delay = self.d(p.collective_timeout_s + p.resubmit_s + p.env_setup_s) \
            + self.params.cost_of(StateSource.REMOTE) + self.recompute(tid, "restart")
        self.resume_after(tid, delay)

    # -- restart-style resource wait ---------------------------------------

    def serve_waiting(self) -> None:
        p = self.params
        while self.waiting:
            tid = self.waiting[0]
            tk = self.tasks[tid]
            need = tk.target_x - tk.x
            free = self.free()
            if need > len(free):
                return
            self.waiting.popleft()
            self.set_workers(tid, tuple(tk.workers) + tuple(free[:need]))
            delay = self.d(p.resubmit_s + p.env_setup_s) + p.cost_of(StateSource.REMOTE) \
                + self.recompute(tid, "restart")
            self.resume_after(tid, delay)
            tk.target_x = 0

    # -- affected-task-only reconfiguration -------------------------------

    def best_fit(self, spec: TaskSpec, limit: int) -> int:
        best, best_x = 0.0, 0
        for x in spec.calibration.points():
            if x > limit:
                break
            v = waf(spec, x)
            if v > best:
                best, best_x = v, x
        return best_x

    def shrink_affected(self, tid: str) -> None:
        tk = self.tasks[tid]
        avail = tk.x + len(self.free())
        x = self.best_fit(tk.spec, min(avail, tk.target_x))
        keep = list(tk.workers[:x])
        keep += self.free()[: x - len(keep)]
        self.transition(tid, tuple(keep), "unicron")
        if x < tk.target_x and tid not in self.deficit:
            self.deficit.append(tid)

    def grow_affected(self) -> None:
        for tid in list(self.deficit):
            tk = self.tasks[tid]
            free = self.free()
            x = self.best_fit(tk.spec, min(tk.x + len(free), tk.target_x))
            if x > tk.x:
                self.transition(tid, tuple(tk.workers) + tuple(free[: x - tk.x]), None)
            if tk.x >= tk.target_x:
                self.deficit.remove(tid)
                tk.target_x = 0

    # -- main loop -------------------------------------------------------

    def start(self) -> None:
        plan = initial_plan(self.config, self.policy, self.horizon)
        placed = self.place(plan.assignment())
        for tid, ws in placed.items():
            self.set_workers(tid, ws)
            self.tasks[tid].running = bool(ws)
        for ev in self.trace.events:
            if ev.t > self.horizon:
                continue
            if ev.kind == "node_repair":
                self.push(ev.t, _REPAIR, "repair", ev.subject)
            else:
                self.push(ev.t, _FAULT, ev.kind, ev)
        if self.sample_every:
            self.push(self.sample_every, _TICK, "tick", None)
        self.sample()

    def step_batch(self, batch: list) -> None:
        detected = [payload for _, _, _, kind, payload in batch if kind == "node_detected"]
        for _, _, _, kind, payload in batch:
            if kind == "resume":
                tid, token = payload
                tk = self.tasks[tid]
                if tk.token == token and tk.x > 0:
                    tk.running = True
                    tk.fail_time = None
            elif kind == "repair":
                self.on_repair(payload)
            elif kind in ("sev1_node_fault", "escalated_fault"):
                accepted = self.on_node_fault(payload.subject if isinstance(payload, TraceEvent) else payload)
                if kind == "escalated_fault" and accepted:
                    self.push(self.now + self.params.escalated_repair_s, _REPAIR, "repair", payload)
            elif kind == "sev2_error":
                self.on_worker_error(payload, Severity.SEV2)
            elif kind == "sev3_error":
                self.on_worker_error(payload, Severity.SEV3)
            elif kind == "tick":
                nxt = self.now + self.sample_every
                if nxt < self.horizon:
                    self.push(nxt, _TICK, "tick", None)
        if detected:
            # node losses noticed in the same instant share one re-plan
            self.on_nodes_detected(detected)

    def run(self) -> MetricsSeries:
        self.start()
        while self.heap and self.heap[0][0] <= self.horizon:
            t, prio = self.heap[0][0], self.heap[0][1]
            self.advance(t)
            batch = []
            while self.heap and self.heap[0][0] == t and self.heap[0][1] == prio:
                batch.append(heapq.heappop(self.heap))
            self.step_batch(batch)
            self.check_capacity()
            self.sample()
        self.advance(self.horizon)
        self.sample()
        return self.metrics

    def check_capacity(self) -> None:
        healthy = set(self.healthy())
        assigned = [w for tk in self.tasks.values() if tk.running for w in tk.workers]
        if len(assigned) != len(set(assigned)) or not healthy.issuperset(assigned):
            raise SimulationError(f"capacity violated at t={self.now}")


def run_simulation(config: RunConfig, trace: FailureTrace, policy: str,
                   params: PolicyParams | None = None, sample_every: float | None = None,
                   log: TextIO | None = None, seed: int | None = None) -> MetricsSeries:
    """Replay ``trace`` under ``policy``; ``seed`` drives escalation draws (default: the trace seed)."""
    if params is None:
        params = PolicyParams.from_mapping(config.policy)
    return _Run(config, trace, policy, params, sample_every, log, seed).run()


def compare_policies(config: RunConfig, trace: FailureTrace, policies: Sequence[str],
                     params: PolicyParams | None = None, parallel: int = 1, seed: int | None = None) -> dict:
    """Accumulated WAF per policy and each policy's ratio to unicron's."""
    if len(policies) < 2:
        raise ValueError("compare needs at least two policies")
    for p in policies:
        if p not in POLICIES:
            raise ValueError(f"unknown policy {p!r}")

    def one(p):
        return run_simulation(config, trace, p, params, seed=seed).accumulated_waf

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            accs = list(pool.map(one, policies))
    else:
        accs = [one(p) for p in policies]
    results = dict(zip(policies, accs))
    base = results.get("unicron")
    report = {"accumulated_waf": results}
    if base is not None:
        report["ratio_to_unicron"] = {p: (v / base if base else math.nan) for p, v in results.items()}
        report["unicron_over"] = {p: (base / v if v else math.inf) for p, v in results.items()}
    return report


def integrate_samples(series: MetricsSeries) -> float:
    """Accumulated WAF recomputed from the samples as a step function."""
    total = 0.0
    for i in range(len(series.times) - 1):
        total += series.cluster_waf[i] * (series.times[i + 1] - series.times[i])
    return total


def metrics_csv_text(series: MetricsSeries) -> str:
    buf = io.StringIO()
    series.write_csv(buf)
    return buf.getvalue()
