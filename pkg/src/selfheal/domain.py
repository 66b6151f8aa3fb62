"""Core value types shared by every other module.

Everything here is a frozen dataclass or an enum so instances can be passed
between the planner, the recovery state machine and the simulator without
defensive copies.
"""

from __future__ import annotations

import csv
import enum
import io
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

WORKERS_PER_NODE = 8

CALIBRATION_HEADER = ("task_id", "x", "flops", "dp", "pp", "tp")


class Severity(enum.IntEnum):
    """Failure severity. Larger value means more severe, so SEV1 > SEV2 > SEV3."""

    SEV3 = 1
    SEV2 = 2
    SEV1 = 3

    @property
    def label(self) -> str:
        return f"sev{4 - int(self)}"

    @classmethod
    def parse(cls, text: str) -> Severity:
        return {"sev1": cls.SEV1, "sev2": cls.SEV2, "sev3": cls.SEV3}[text.lower()]

    def escalated(self) -> Severity:
        if self is Severity.SEV1:
            raise ValueError("sev1 cannot be escalated further")
        return Severity(int(self) + 1)


class Source(str, enum.Enum):
    NODE_HEALTH = "node_health"
    PROCESS_SUPERVISION = "process_supervision"
    EXCEPTION_PROPAGATION = "exception_propagation"
    STATISTICAL_MONITORING = "statistical_monitoring"


# (source, status) -> severity, one row per entry of the classification table.
SEVERITY_TABLE: Mapping[tuple[Source, str], Severity] = MappingProxyType({
    (Source.NODE_HEALTH, "Lost connection"): Severity.SEV1,
    (Source.PROCESS_SUPERVISION, "Exited abnormally"): Severity.SEV2,
    (Source.EXCEPTION_PROPAGATION, "Connection refused/reset"): Severity.SEV3,
    (Source.EXCEPTION_PROPAGATION, "Illegal memory access"): Severity.SEV2,
    (Source.EXCEPTION_PROPAGATION, "ECC errors"): Severity.SEV1,
    (Source.EXCEPTION_PROPAGATION, "Invalid DMA mapping"): Severity.SEV1,
    (Source.EXCEPTION_PROPAGATION, "CUDA errors"): Severity.SEV2,
    (Source.EXCEPTION_PROPAGATION, "NVLink errors"): Severity.SEV1,
    (Source.EXCEPTION_PROPAGATION, "GPU driver errors"): Severity.SEV1,
    (Source.EXCEPTION_PROPAGATION, "Other network errors"): Severity.SEV3,
    (Source.EXCEPTION_PROPAGATION, "Other software errors"): Severity.SEV2,
    (Source.STATISTICAL_MONITORING, "NCCL timeout"): Severity.SEV3,
    (Source.STATISTICAL_MONITORING, "Link flapping"): Severity.SEV3,
    (Source.STATISTICAL_MONITORING, "Task hang"): Severity.SEV2,
    (Source.STATISTICAL_MONITORING, "Other software errors"): Severity.SEV2,
})


def severity_of(source: Source, status_kind: str) -> Severity:
    return SEVERITY_TABLE[(Source(source), status_kind)]


def source_of(status_kind: str) -> Source:
    """First source (in table order) that can report ``status_kind``."""
    for src, status in SEVERITY_TABLE:
        if status == status_kind:
            return src
    raise KeyError(status_kind)


class Health(str, enum.Enum):
    HEALTHY = "healthy"
    LOST = "lost"
    DRAINED = "drained"


@dataclass(frozen=True)
class CalibrationPoint:
    flops: float
    dp: int
    pp: int
    tp: int


@dataclass(frozen=True)
class ThroughputTable:
    """Calibrated aggregate FLOP/s per worker count, with the layout that achieved it.

    Values may dip as x grows; nothing here smooths or interpolates them.
    """

    entries: Mapping[int, CalibrationPoint] = field(default_factory=dict)
    min_workers: int = 1

    def __post_init__(self):
        for x, point in self.entries.items():
            if x < 1:
                raise ValueError(f"calibrated worker count must be >= 1, got {x}")
            if point.flops < 0:
                raise ValueError(f"negative throughput at x={x}")
        ordered = dict(sorted(self.entries.items()))
        object.__setattr__(self, "entries", MappingProxyType(ordered))

    def points(self) -> list[int]:
        """Calibrated worker counts at or above the minimum, ascending."""
        return [x for x in self.entries if x >= self.min_workers]

    def layout(self, x: int) -> tuple[int, int, int]:
        if x == 0:
            return (0, 0, 0)
        p = self.entries[x]
        return (p.dp, p.pp, p.tp)

    def with_min_workers(self, min_workers: int) -> ThroughputTable:
        return replace(self, min_workers=min_workers)


def table_lookup(tbl: ThroughputTable, x: int) -> float:
    if x < 0:
        raise ValueError("worker count must be non-negative")
    if x < tbl.min_workers or x not in tbl.entries:
        return 0.0
    return tbl.entries[x].flops


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    model_size: float
    weight: float
    min_workers: int
    calibration: ThroughputTable = field(default_factory=ThroughputTable, compare=False, repr=False)
    d_iter: float = 60.0
    microbatches: int = 128

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError(f"task {self.task_id}: weight must be > 0")
        if self.min_workers < 1:
            raise ValueError(f"task {self.task_id}: min_workers must be >= 1")
        if self.calibration.min_workers != self.min_workers:
            object.__setattr__(self, "calibration", self.calibration.with_min_workers(self.min_workers))

    def throughput(self, x: int) -> float:
        return table_lookup(self.calibration, x)


@dataclass(frozen=True)
class Node:
    node_id: str
    worker_ids: tuple[str, ...]
    health: Health = Health.HEALTHY


@dataclass(frozen=True)
class Worker:
    worker_id: str
    node_id: str
    health: Health
    assigned_task: str | None


@dataclass(frozen=True)
class ClusterState:
    nodes: tuple[Node, ...]
    assignment: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        frozen = {t: tuple(ws) for t, ws in sorted(self.assignment.items())}
        object.__setattr__(self, "assignment", MappingProxyType(frozen))

    @classmethod
    def build(cls, n_nodes: int, workers_per_node: int = WORKERS_PER_NODE) -> ClusterState:
        width = max(2, len(str(n_nodes - 1)))
        nodes = []
        for i in range(n_nodes):
            nid = f"n{i:0{width}d}"
            nodes.append(Node(nid, tuple(f"{nid}-g{g}" for g in range(workers_per_node))))
        return cls(tuple(nodes))

    @property
    def workers(self) -> tuple[Worker, ...]:
        owner: dict[str, str] = {}
        for task_id, ws in self.assignment.items():
            for w in ws:
                owner.setdefault(w, task_id)
        return tuple(
            Worker(w, n.node_id, n.health, owner.get(w))
            for n in self.nodes
            for w in n.worker_ids
        )

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def node_of(self, worker_id: str) -> str:
        for n in self.nodes:
            if worker_id in n.worker_ids:
                return n.node_id
        raise KeyError(worker_id)

    def healthy_workers(self) -> list[str]:
        return [w for n in self.nodes if n.health is Health.HEALTHY for w in n.worker_ids]

    @property
    def capacity(self) -> int:
        return len(self.healthy_workers())

    def counts(self) -> dict[str, int]:
        return {t: len(ws) for t, ws in self.assignment.items()}

    def free_workers(self) -> list[str]:
        used = {w for ws in self.assignment.values() for w in ws}
        return [w for w in self.healthy_workers() if w not in used]

    def tasks_on_node(self, node_id: str) -> list[str]:
        members = set(self.node(node_id).worker_ids)
        return sorted(t for t, ws in self.assignment.items() if members.intersection(ws))

    def with_health(self, node_id: str, health: Health) -> ClusterState:
        nodes = tuple(replace(n, health=health) if n.node_id == node_id else n for n in self.nodes)
        return replace(self, nodes=nodes)

    def with_assignment(self, assignment: Mapping[str, Sequence[str]]) -> ClusterState:
        return replace(self, assignment={t: tuple(ws) for t, ws in assignment.items() if ws})

    def add_nodes(self, count: int, workers_per_node: int = WORKERS_PER_NODE, prefix: str = "j") -> ClusterState:
        existing = {n.node_id for n in self.nodes}
        new, i = [], 0
        while len(new) < count:
            nid = f"{prefix}{i:02d}"
            i += 1
            if nid in existing:
                continue
            new.append(Node(nid, tuple(f"{nid}-g{g}" for g in range(workers_per_node))))
        return replace(self, nodes=self.nodes + tuple(new))


def validate_cluster(state: ClusterState) -> list[str]:
    problems = []
    known = {w for n in state.nodes for w in n.worker_ids}
    seen: dict[str, str] = {}
    for task_id, ws in state.assignment.items():
        for w in ws:
            if w not in known:
                problems.append(f"unknown worker {w} assigned to {task_id}")
            elif w in seen and seen[w] != task_id:
                problems.append(f"double assignment: worker {w} in {seen[w]} and {task_id}")
            else:
                seen[w] = task_id
    total = sum(len(ws) for ws in state.assignment.values())
    if total > state.capacity:
        problems.append(f"capacity violation: {total} workers assigned, {state.capacity} healthy")
    return problems


@dataclass(frozen=True)
class ErrorEvent:
    time: float
    source: Source
    status_kind: str
    subject: str
    severity: Severity

    @classmethod
    def make(cls, time: float, source: Source, status_kind: str, subject: str) -> ErrorEvent:
        return cls(time, Source(source), status_kind, subject, severity_of(source, status_kind))

    def sort_key(self):
        # most severe first, then earliest, then subject
        return (-int(self.severity), self.time, self.subject)

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "source": self.source.value,
            "status": self.status_kind,
            "subject": self.subject,
            "severity": self.severity.label,
        }


@dataclass(frozen=True)
class TaskPlan:
    task_id: str
    x: int
    dp: int = 0
    pp: int = 0
    tp: int = 0
    microbatches: tuple[int, ...] = ()


@dataclass(frozen=True)
class Plan:
    tasks: tuple[TaskPlan, ...]
    objective: int = 0

    def x(self, task_id: str) -> int:
        for tp in self.tasks:
            if tp.task_id == task_id:
                return tp.x
        return 0

    def assignment(self) -> dict[str, int]:
        return {tp.task_id: tp.x for tp in self.tasks}

    @property
    def total_workers(self) -> int:
        return sum(tp.x for tp in self.tasks)

    def to_dict(self) -> dict:
        return {
            "tasks": [{"id": t.task_id, "x": t.x, "dp": t.dp, "pp": t.pp, "tp": t.tp} for t in self.tasks],
            "objective": self.objective,
        }


def split_microbatches(total: int, dp: int) -> tuple[int, ...]:
    """Micro-batch counts per DP rank; remainders go to the lowest ranks."""
    if dp <= 0:
        return ()
    base, extra = divmod(total, dp)
    return tuple(base + (1 if r < extra else 0) for r in range(dp))


@dataclass(frozen=True)
class CostParams:
    lambda_worker: float
    d_transition: float = 60.0
    checkpoint_interval: float = 1800.0
    d_iter: Mapping[str, float] = field(default_factory=dict)
    horizon: float = 7 * 86400.0

    def __post_init__(self):
        object.__setattr__(self, "d_iter", MappingProxyType(dict(self.d_iter)))
        for name in ("lambda_worker", "checkpoint_interval", "horizon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.d_transition < 0:
            raise ValueError("d_transition must be >= 0")
        for task_id, d in self.d_iter.items():
            if d <= 0:
                raise ValueError(f"d_iter[{task_id}] must be > 0")
            if self.checkpoint_interval < d:
                raise ValueError(f"checkpoint_interval shorter than d_iter[{task_id}]")


# -- calibration CSV ---------------------------------------------------------

def read_calibration_csv(source: str | os.PathLike | io.TextIOBase) -> dict[str, dict[int, CalibrationPoint]]:
    """Parse a calibration CSV into ``{task_id: {x: point}}``.

    Raises ``ValueError`` naming the offending line on malformed input.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="") as fh:
            return read_calibration_csv(fh)
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CALIBRATION_HEADER:
        raise ValueError(f"line 1: expected header {','.join(CALIBRATION_HEADER)}")
    out: dict[str, dict[int, CalibrationPoint]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(CALIBRATION_HEADER):
            raise ValueError(f"line {lineno}: expected {len(CALIBRATION_HEADER)} fields, got {len(row)}")
        task_id = row[0].strip()
        try:
            x, flops = int(row[1]), float(row[2])
            dp, pp, tp = int(row[3]), int(row[4]), int(row[5])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        if x < 1 or flops < 0:
            raise ValueError(f"line {lineno}: x must be >= 1 and flops >= 0")
        if dp * pp * tp != x:
            raise ValueError(f"line {lineno}: dp*pp*tp = {dp * pp * tp} != x = {x}")
        rows = out.setdefault(task_id, {})
        if x in rows:
            raise ValueError(f"line {lineno}: duplicate x={x} for task {task_id}")
        rows[x] = CalibrationPoint(flops, dp, pp, tp)
    return out


def write_calibration_csv(tables: Mapping[str, ThroughputTable], dest: str | os.PathLike | io.TextIOBase) -> None:
    if isinstance(dest, (str, os.PathLike)):
        tmp = Path(f"{os.fspath(dest)}.tmp")
        with open(tmp, "w", newline="") as fh:
            write_calibration_csv(tables, fh)
        os.replace(tmp, dest)
        return
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(CALIBRATION_HEADER)
    for task_id in sorted(tables):
        for x, p in tables[task_id].entries.items():
            writer.writerow([task_id, x, repr(float(p.flops)), p.dp, p.pp, p.tp])
