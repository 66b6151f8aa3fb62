"""Failure traces: Poisson arrivals per node, severity mix, node repairs."""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import SEVERITY_TABLE, ClusterState, Severity, Source

DAY = 86400.0
WEEK = 7 * DAY

KINDS = ("sev1_node_fault", "sev2_error", "sev3_error", "node_repair")
_KIND_OF = {Severity.SEV1: "sev1_node_fault", Severity.SEV2: "sev2_error", Severity.SEV3: "sev3_error"}

# transient faults are 73% of errors; the remainder is split between restarts and node loss
DEFAULT_MIX = {"sev1": 0.12, "sev2": 0.15, "sev3": 0.73}

# statuses a worker-level event of each severity may carry (node-level sev1 is "Lost connection")
STATUS_CHOICES = {
    sev: sorted({status for (src, status), s in SEVERITY_TABLE.items() if s is sev and src is not Source.NODE_HEALTH})
    for sev in (Severity.SEV2, Severity.SEV3)
}


@dataclass(frozen=True)
class TraceEvent:
    t: float
    kind: str
    subject: str
    status: str | None = None

    def to_dict(self) -> dict:
        d = {"t": self.t, "kind": self.kind, "subject": self.subject}
        if self.status is not None:
            d["status"] = self.status
        return d


@dataclass(frozen=True)
class FailureTrace:
    events: tuple[TraceEvent, ...]
    horizon: float
    seed: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(sorted(self.events, key=lambda e: (e.t, KINDS.index(e.kind), e.subject))))

    def counts(self) -> dict[str, int]:
        c = Counter(e.kind for e in self.events)
        return {k: c.get(k, 0) for k in KINDS}

    def check(self) -> None:
        down: set[str] = set()
        for e in self.events:
            if e.kind == "sev1_node_fault":
                down.add(e.subject)
            elif e.kind == "node_repair":
                if e.subject not in down:
                    raise ValueError(f"repair of node {e.subject} that never failed")
                down.discard(e.subject)

    def scaled(self, keep) -> FailureTrace:
        """Sub-trace keeping the failures selected by ``keep(event)`` and their repairs."""
        kept, down = [], set()
        for e in self.events:
            if e.kind == "node_repair":
                if e.subject in down:
                    down.discard(e.subject)
                    kept.append(e)
            elif keep(e):
                kept.append(e)
                if e.kind == "sev1_node_fault":
                    down.add(e.subject)
        return FailureTrace(tuple(kept), self.horizon, self.seed, dict(self.meta))


@dataclass(frozen=True)
class TraceSpec:
    lambda_node: float  # failure events per node per second
    horizon: float
    mix: dict = field(default_factory=lambda: dict(DEFAULT_MIX))
    repair: str = "uniform"  # "uniform" over repair_range, or "exponential" with mean repair_range[0]
    repair_range: tuple[float, float] = (1 * DAY, 7 * DAY)
    n_nodes: int = 16
    workers_per_node: int = 8


def _trace_a() -> TraceSpec:
    sev1, other = 10, 33
    total = sev1 + other
    horizon = 8 * WEEK
    mix = {
        "sev1": sev1 / total,
        "sev2": other / total * DEFAULT_MIX["sev2"] / (DEFAULT_MIX["sev2"] + DEFAULT_MIX["sev3"]),
        "sev3": other / total * DEFAULT_MIX["sev3"] / (DEFAULT_MIX["sev2"] + DEFAULT_MIX["sev3"]),
    }
    return TraceSpec(total / (16 * horizon), horizon, mix, "uniform", (1 * DAY, 7 * DAY))


def _trace_b() -> TraceSpec:
    a = _trace_a()
    lam = a.lambda_node * 20
    horizon = 7 * DAY
    # repairs keep pace with faults: mean repair equals the cluster-wide sev1 inter-arrival time
    sev1_rate = lam * a.n_nodes * a.mix["sev1"]
    return TraceSpec(lam, horizon, dict(a.mix), "exponential", (1.0 / sev1_rate, 1.0 / sev1_rate))


PRESETS = {"trace-a": _trace_a, "trace-b": _trace_b}


def preset(name: str) -> TraceSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def generate_trace(spec: TraceSpec, seed: int, cluster: ClusterState | None = None) -> FailureTrace:
    """Independent Poisson failure process per node.

    A node that suffered a node fault produces no events until it is repaired.
    Each node draws from its own Philox stream, so adding nodes never
    perturbs the events of existing ones.
    """
    probs = [spec.mix.get("sev1", 0.0), spec.mix.get("sev2", 0.0), spec.mix.get("sev3", 0.0)]
    if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
        raise ValueError("severity mix must be non-negative and sum to 1")
    lo, hi = spec.repair_range
    if lo > hi or lo < 0:
        raise ValueError("repair range must satisfy 0 <= min <= max")
    if spec.lambda_node < 0:
        raise ValueError("lambda must be >= 0")
    if cluster is None:
        cluster = ClusterState.build(spec.n_nodes, spec.workers_per_node)

    events: list[TraceEvent] = []
    root = np.random.SeedSequence(seed)
    streams = root.spawn(len(cluster.nodes))
    if spec.lambda_node > 0:
        for node, ss in zip(cluster.nodes, streams):
            rng = np.random.Generator(np.random.Philox(ss))
            t = 0.0
            while True:
                t += rng.exponential(1.0 / spec.lambda_node)
                if t >= spec.horizon:
                    break
                sev = (Severity.SEV1, Severity.SEV2, Severity.SEV3)[rng.choice(3, p=probs)]
                if sev is Severity.SEV1:
                    events.append(TraceEvent(float(t), "sev1_node_fault", node.node_id, "Lost connection"))
                    if spec.repair == "uniform":
                        delay = rng.uniform(lo, hi)
                    else:
                        delay = rng.exponential(lo)
                    t += delay
                    if t >= spec.horizon:
                        break
                    events.append(TraceEvent(float(t), "node_repair", node.node_id))
                else:
                    worker = node.worker_ids[int(rng.integers(len(node.worker_ids)))]
                    choices = STATUS_CHOICES[sev]
                    status = choices[int(rng.integers(len(choices)))]
                    events.append(TraceEvent(float(t), _KIND_OF[sev], worker, status))
    meta = {"lambda_node": spec.lambda_node, "mix": dict(spec.mix), "repair": spec.repair,
            "repair_range": list(spec.repair_range)}
    return FailureTrace(tuple(events), spec.horizon, seed, meta)


def write_trace(trace: FailureTrace, path: str | os.PathLike, extra_header: dict | None = None) -> None:
    header = {"horizon": trace.horizon, "seed": trace.seed}
    header.update(extra_header or {})
    tmp = Path(f"{os.fspath(path)}.tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for e in trace.events:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_trace(path: str | os.PathLike, horizon: float | None = None) -> FailureTrace:
    events, seed, meta = [], None, {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if "kind" not in obj:
                if lineno != 1:
                    raise ValueError(f"{path}:{lineno}: header must be the first line")
                horizon = obj.get("horizon", horizon)
                seed = obj.get("seed")
                meta = {k: v for k, v in obj.items() if k not in ("horizon", "seed")}
                continue
            if obj["kind"] not in KINDS:
                raise ValueError(f"{path}:{lineno}: unknown kind {obj['kind']!r}")
            events.append(TraceEvent(float(obj["t"]), obj["kind"], str(obj["subject"]), obj.get("status")))
    if horizon is None:
        horizon = max((e.t for e in events), default=0.0)
    trace = FailureTrace(tuple(events), float(horizon), seed, meta)
    trace.check()
    return trace


def summarize(trace: FailureTrace) -> dict:
    c = trace.counts()
    return {"horizon": trace.horizon, "seed": trace.seed, "sev1": c["sev1_node_fault"],
            "sev2": c["sev2_error"], "sev3": c["sev3_error"], "repairs": c["node_repair"]}


def severity_counts(traces: Sequence[FailureTrace]) -> dict[str, float]:
    """Mean per-kind counts over several traces."""
    out = Counter()
    for tr in traces:
        out.update(tr.counts())
    return {k: out[k] / max(1, len(traces)) for k in KINDS}
