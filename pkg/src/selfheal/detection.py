"""In-band failure detectors: heartbeats, process supervision, exception
classification and iteration-time statistics."""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

from .domain import ErrorEvent, Severity, Source, SEVERITY_TABLE

DEFAULT_WINDOW = 16
DEGRADED_FACTOR = 1.1
FAILED_FACTOR = 3.0
HEARTBEAT_PERIOD = 1.0
HEARTBEAT_TIMEOUT = 5.0
HEARTBEAT_TRANSIT = 0.1
SUPERVISION_PERIOD = 1.5
SUPERVISION_REPORT_DELAY = 0.3

# measured end-to-end latencies used by the simulator
LATENCY = {
    Source.NODE_HEALTH: 5.6,
    Source.PROCESS_SUPERVISION: 1.8,
    Source.EXCEPTION_PROPAGATION: 0.3,
}


class RegistryError(KeyError):
    pass


class PrematureCheck(RuntimeError):
    """Statistical check requested before any iteration finished."""


class HealthStatus(str, enum.Enum):
    NORMAL = "normal"
    DEGRADED = "degraded"
    FAILED = "failed"


@dataclass
class HeartbeatRegistry:
    timeout: float = HEARTBEAT_TIMEOUT
    period: float = HEARTBEAT_PERIOD
    last_beat: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.timeout <= self.period:
            raise ValueError("heartbeat timeout must exceed the heartbeat period")

    def register(self, node_id: str, now: float) -> None:
        self.last_beat[node_id] = now

    def beat(self, node_id: str, now: float) -> None:
        if node_id not in self.last_beat:
            raise RegistryError(node_id)
        self.last_beat[node_id] = max(self.last_beat[node_id], now)


def check_heartbeat(reg: HeartbeatRegistry, node_id: str, now: float) -> ErrorEvent | None:
    try:
        last = reg.last_beat[node_id]
    except KeyError:
        raise RegistryError(node_id) from None
    if now - last > reg.timeout:
        return ErrorEvent.make(now, Source.NODE_HEALTH, "Lost connection", node_id)
    return None


def heartbeat_detection_latency(
    fail_offset: float,
    period: float = HEARTBEAT_PERIOD,
    timeout: float = HEARTBEAT_TIMEOUT,
    transit: float = HEARTBEAT_TRANSIT,
) -> float:
    """Delay from a node dying to the coordinator flagging it.

    The agent beats at multiples of ``period``; the node dies ``fail_offset``
    seconds after its last beat. The coordinator polls on the same period and
    a notification takes ``transit`` seconds to propagate.
    """
    if not 0 <= fail_offset < period:
        raise ValueError("fail_offset must lie in [0, period)")
    reg = HeartbeatRegistry(timeout=timeout, period=period)
    reg.register("node", 0.0)
    k = 1
    while check_heartbeat(reg, "node", k * period) is None:
        k += 1
    return k * period + transit - fail_offset


def supervise_process(worker_id: str, exit_code: int | None, now: float = 0.0) -> ErrorEvent | None:
    """``exit_code`` is None while the process is still running."""
    if exit_code is None or exit_code == 0:
        return None
    return ErrorEvent.make(now, Source.PROCESS_SUPERVISION, "Exited abnormally", worker_id)


def supervision_latency(exit_offset: float, period: float = SUPERVISION_PERIOD,
                        report_delay: float = SUPERVISION_REPORT_DELAY) -> float:
    """Time from a process exiting ``exit_offset`` seconds after a poll until it is reported."""
    if not 0 <= exit_offset < period:
        raise ValueError("exit_offset must lie in [0, period)")
    return period - exit_offset + report_delay


_EXCEPTION_LABELS = {
    status: sev for (src, status), sev in SEVERITY_TABLE.items() if src is Source.EXCEPTION_PROPAGATION
}


def classify_exception(status_kind: str) -> Severity:
    return _EXCEPTION_LABELS.get(status_kind, Severity.SEV2)


def exception_event(worker_id: str, status_kind: str, now: float = 0.0) -> ErrorEvent:
    if status_kind not in _EXCEPTION_LABELS:
        status_kind = "Other software errors"
    return ErrorEvent.make(now, Source.EXCEPTION_PROPAGATION, status_kind, worker_id)


@dataclass
class _TaskWindow:
    durations: deque
    last_completion: float | None = None

    @property
    def mean(self) -> float:
        return math.fsum(self.durations) / len(self.durations)


@dataclass
class IterationStats:
    """Rolling iteration-time statistics per task."""

    window: int = DEFAULT_WINDOW
    degraded_factor: float = DEGRADED_FACTOR
    failed_factor: float = FAILED_FACTOR
    tasks: dict[str, _TaskWindow] = field(default_factory=dict)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def mean(self, task_id: str) -> float:
        w = self.tasks.get(task_id)
        if w is None or not w.durations:
            raise PrematureCheck(task_id)
        return w.mean

    def last_completion(self, task_id: str) -> float:
        w = self.tasks.get(task_id)
        if w is None or w.last_completion is None:
            raise PrematureCheck(task_id)
        return w.last_completion

    def reset(self, task_id: str) -> None:
        """Drop history, e.g. after the task was reconfigured."""
        self.tasks.pop(task_id, None)

    def failure_deadline(self, task_id: str) -> float:
        """Elapsed time past which the task counts as failed."""
        return self.failed_factor * self.mean(task_id)


def observe_iteration(stats: IterationStats, task_id: str, duration: float,
                      completed_at: float | None = None) -> IterationStats:
    if duration <= 0:
        raise ValueError("iteration duration must be > 0")
    w = stats.tasks.get(task_id)
    if w is None:
        w = stats.tasks[task_id] = _TaskWindow(deque(maxlen=stats.window))
    w.durations.append(duration)
    if completed_at is None:
        completed_at = (w.last_completion or 0.0) + duration
    w.last_completion = completed_at
    return stats


def _exceeds(elapsed: float, factor: float, durations: deque) -> bool:
    """elapsed > factor * mean(durations), decided exactly on the float inputs."""
    n = len(durations)
    approx = factor * math.fsum(durations) / n
    if abs(elapsed - approx) > 1e-9 * abs(approx):
        return elapsed > approx
    return Fraction(elapsed) * n > Fraction(factor) * sum(map(Fraction, durations))


def statistical_check(stats: IterationStats, task_id: str, now: float) -> HealthStatus:
    stats.mean(task_id)  # raises before the first completed iteration
    w = stats.tasks[task_id]
    elapsed = now - w.last_completion
    if _exceeds(elapsed, stats.failed_factor, w.durations):
        return HealthStatus.FAILED
    if _exceeds(elapsed, stats.degraded_factor, w.durations):
        return HealthStatus.DEGRADED
    return HealthStatus.NORMAL


def statistical_event(stats: IterationStats, task_id: str, now: float,
                      network_suspect: bool = False) -> ErrorEvent | None:
    """Turn a failed statistical check into an event.

    A stall with a pending network condition is reported as an NCCL timeout
    (sev3, retried in place) before it is treated as a hang.
    """
    if statistical_check(stats, task_id, now) is not HealthStatus.FAILED:
        return None
    status = "NCCL timeout" if network_suspect else "Task hang"
    return ErrorEvent.make(now, Source.STATISTICAL_MONITORING, status, task_id)


def statistical_latency(d_iter: float, window: int = DEFAULT_WINDOW, failed_factor: float = FAILED_FACTOR) -> float:
    """Detection delay for a task that stalls right after an iteration of a steady run."""
    stats = IterationStats(window=window, failed_factor=failed_factor)
    for _ in range(window):
        observe_iteration(stats, "task", d_iter)
    return stats.failure_deadline("task")
