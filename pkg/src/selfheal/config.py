"""Run configuration: JSON file describing the cluster, tasks and cost parameters."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .domain import ClusterState, CostParams, Node, TaskSpec, ThroughputTable, read_calibration_csv
from .synth import SynthModel, min_feasible_workers, synthesize_table
from .workloads import case_tasks

DAY = 86400.0
# ten node losses per 128 workers over eight weeks
DEFAULT_LAMBDA_WORKER = 10 / (128 * 56 * DAY)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class DetectionParams:
    heartbeat_timeout_s: float = 5.0
    degraded_factor: float = 1.1
    failed_factor: float = 3.0


@dataclass(frozen=True)
class RunConfig:
    cluster: ClusterState
    tasks: tuple[TaskSpec, ...]
    cost: CostParams
    detection: DetectionParams = DetectionParams()
    policy: Mapping[str, Any] = field(default_factory=dict)
    current: Mapping[str, int] = field(default_factory=dict)
    source: str | None = None
    digest: str = ""

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)


def _num(obj: Mapping, key: str, where: str, default=None, kind=float, minimum=None):
    if key not in obj:
        if default is None:
            raise ConfigError(f"{where}.{key}: required field missing")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not float(v).is_integer()):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {v!r}")
    v = kind(v)
    if minimum is not None and v < minimum:
        raise ConfigError(f"{where}.{key}: must be >= {minimum}, got {v}")
    return v


def _nodes(raw: Any) -> ClusterState:
    if isinstance(raw, int) and not isinstance(raw, bool):
        if raw < 1:
            raise ConfigError("nodes: need at least one node")
        return ClusterState.build(raw)
    if isinstance(raw, Mapping):
        count = _num(raw, "count", "nodes", kind=int, minimum=1)
        per = _num(raw, "workers_per_node", "nodes", default=8, kind=int, minimum=1)
        return ClusterState.build(count, per)
    if isinstance(raw, list) and raw:
        nodes, seen = [], set()
        for i, item in enumerate(raw):
            where = f"nodes[{i}]"
            if not isinstance(item, Mapping) or "id" not in item:
                raise ConfigError(f"{where}: expected an object with an id")
            nid = str(item["id"])
            if nid in seen:
                raise ConfigError(f"{where}.id: duplicate node {nid}")
            seen.add(nid)
            per = _num(item, "workers", where, default=8, kind=int, minimum=1)
            nodes.append(Node(nid, tuple(f"{nid}-g{g}" for g in range(per))))
        return ClusterState(tuple(nodes))
    raise ConfigError("nodes: expected a count, {count, workers_per_node} or a list of nodes")


def _tasks(raw: Any, base: Path, capacity: int, calib_path: str | None, model: SynthModel) -> tuple[TaskSpec, ...]:
    if isinstance(raw, Mapping) and "case" in raw:
        case = _num(raw, "case", "tasks", kind=int)
        try:
            return case_tasks(case, capacity, model)
        except ValueError as exc:
            raise ConfigError(f"tasks.case: {exc}") from None
    if not isinstance(raw, list) or not raw:
        raise ConfigError("tasks: expected a non-empty list or {\"case\": N}")
    tables = {}
    if calib_path is not None:
        path = Path(calib_path)
        if not path.is_absolute():
            path = base / path
        try:
            tables = read_calibration_csv(path)
        except OSError as exc:
            raise ConfigError(f"calibration: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"calibration: {path}: {exc}") from None
    out, seen = [], set()
    for i, item in enumerate(raw):
        where = f"tasks[{i}]"
        if not isinstance(item, Mapping) or "id" not in item:
            raise ConfigError(f"{where}: expected an object with an id")
        tid = str(item["id"])
        if tid in seen:
            raise ConfigError(f"{where}.id: duplicate task {tid}")
        seen.add(tid)
        size = _num(item, "model_size", where, minimum=1.0)
        weight = _num(item, "weight", where, default=1.0)
        if weight <= 0:
            raise ConfigError(f"{where}.weight: must be > 0")
        d_iter = _num(item, "d_iter", where, default=60.0)
        if d_iter <= 0:
            raise ConfigError(f"{where}.d_iter: must be > 0")
        mbs = _num(item, "microbatches", where, default=128, kind=int, minimum=1)
        if tid in tables:
            mw = _num(item, "min_workers", where, default=min(tables[tid]), kind=int, minimum=1)
            table = ThroughputTable(tables[tid], mw)
        else:
            if calib_path is not None:
                raise ConfigError(f"{where}: no calibration rows for task {tid}")
            try:
                auto = min_feasible_workers(size, mbs, model)
            except ValueError as exc:
                raise ConfigError(f"{where}.model_size: {exc}") from None
            mw = _num(item, "min_workers", where, default=auto, kind=int, minimum=1)
            bare = TaskSpec(tid, size, weight, mw, d_iter=d_iter, microbatches=mbs)
            table = synthesize_table(bare, max(capacity, mw), model)
        out.append(TaskSpec(tid, size, weight, mw, table, d_iter, mbs))
    return tuple(out)


def parse_config(data: Mapping, base: str | os.PathLike = ".", source: str | None = None,
                 digest: str = "") -> RunConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("top level: expected a JSON object")
    known = {"nodes", "tasks", "cost_params", "detection", "policy", "calibration", "synthetic", "assignment"}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"top level: unknown field(s) {sorted(extra)}")
    if "nodes" not in data:
        raise ConfigError("nodes: required field missing")
    cluster = _nodes(data["nodes"])

    synth_raw = data.get("synthetic", {})
    if not isinstance(synth_raw, Mapping):
        raise ConfigError("synthetic: expected an object")
    names = {f.name for f in fields(SynthModel)}
    bad = set(synth_raw) - names
    if bad:
        raise ConfigError(f"synthetic: unknown field(s) {sorted(bad)}")
    model = replace(SynthModel(), **{k: (int if k in ("node_size", "max_pp") else float)(v) for k, v in synth_raw.items()})

    if "tasks" not in data:
        raise ConfigError("tasks: required field missing")
    tasks = _tasks(data["tasks"], Path(base), len(cluster.workers), data.get("calibration"), model)

    cp = data.get("cost_params", {})
    if not isinstance(cp, Mapping):
        raise ConfigError("cost_params: expected an object")
    lam = _num(cp, "lambda_worker", "cost_params", default=DEFAULT_LAMBDA_WORKER)
    if lam <= 0:
        raise ConfigError("cost_params.lambda_worker: must be > 0")
    d_iter = {t.task_id: t.d_iter for t in tasks}
    try:
        cost = CostParams(
            lambda_worker=lam,
            d_transition=_num(cp, "d_transition", "cost_params", default=60.0, minimum=0.0),
            checkpoint_interval=_num(cp, "checkpoint_interval", "cost_params", default=1800.0),
            d_iter=d_iter,
            horizon=_num(cp, "horizon", "cost_params", default=7 * DAY),
        )
    except ValueError as exc:
        raise ConfigError(f"cost_params: {exc}") from None

    det_raw = data.get("detection", {})
    if not isinstance(det_raw, Mapping):
        raise ConfigError("detection: expected an object")
    detection = DetectionParams(
        heartbeat_timeout_s=_num(det_raw, "heartbeat_timeout_s", "detection", default=5.0),
        degraded_factor=_num(det_raw, "degraded_factor", "detection", default=1.1),
        failed_factor=_num(det_raw, "failed_factor", "detection", default=3.0),
    )
    if not 1.0 < detection.degraded_factor < detection.failed_factor:
        raise ConfigError("detection: need 1 < degraded_factor < failed_factor")

    policy = data.get("policy", {})
    if not isinstance(policy, Mapping):
        raise ConfigError("policy: expected an object")

    current = data.get("assignment", {})
    if not isinstance(current, Mapping):
        raise ConfigError("assignment: expected an object of task id -> worker count")
    ids = {t.task_id for t in tasks}
    for tid, x in current.items():
        if tid not in ids:
            raise ConfigError(f"assignment.{tid}: unknown task")
        _num(current, tid, "assignment", kind=int, minimum=0)
    if sum(current.values()) > len(cluster.workers):
        raise ConfigError("assignment: more workers assigned than the cluster has")

    return RunConfig(cluster, tasks, cost, detection, dict(policy), {k: int(v) for k, v in current.items()},
                     source, digest)


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    raw = path.read_bytes()
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return parse_config(data, path.parent, str(path), hashlib.sha256(raw).hexdigest())


def case_config(case: int = 5, **cost_overrides) -> RunConfig:
    """In-memory configuration for a reference workload on 16 nodes of 8 workers."""
    data = {"nodes": 16, "tasks": {"case": case}, "cost_params": dict(cost_overrides)}
    blob = json.dumps(data, sort_keys=True).encode()
    return parse_config(data, ".", None, hashlib.sha256(blob).hexdigest())
