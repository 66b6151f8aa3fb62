"""Coordinator error handling: classify an event, act on it, escalate on failure.

sev3 is retried in place once, sev2 restarts the training process once, and
sev1 drains the node and asks the planner for a new plan. A failed retry or
restart is re-raised one severity level up.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, TextIO

from .domain import ClusterState, ErrorEvent, Health, Severity, TaskSpec

REATTEMPT_BACKOFF = 1.0
MAX_ESCALATIONS = 2


class ActionKind(str, enum.Enum):
    REATTEMPT_IN_PLACE = "reattempt_in_place"
    RESTART_PROCESS = "restart_process"
    RECONFIGURE_CLUSTER = "reconfigure_cluster"


_ACTION_FOR = {
    Severity.SEV3: ActionKind.REATTEMPT_IN_PLACE,
    Severity.SEV2: ActionKind.RESTART_PROCESS,
    Severity.SEV1: ActionKind.RECONFIGURE_CLUSTER,
}


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"


class FatalRecoveryError(RuntimeError):
    """A cluster reconfiguration itself failed; nothing is left to escalate to."""


class RejectedTrigger(ValueError):
    pass


@dataclass(frozen=True)
class RecoveryAction:
    kind: ActionKind
    task_id: str | None = None
    node_id: str | None = None
    event: ErrorEvent | None = field(default=None, compare=False)


@dataclass(frozen=True)
class EscalationRecord:
    event: ErrorEvent
    action: RecoveryAction
    outcome: Outcome
    escalated_to: Severity


@dataclass(frozen=True)
class ReconfigRequest:
    """Ask the planner for a fresh plan over ``tasks`` using ``capacity`` healthy workers."""

    reason: str
    subject: str | None
    tasks: tuple[str, ...]
    capacity: int
    faulted: frozenset[str] = frozenset()


def _locate(state: ClusterState, subject: str) -> tuple[str | None, str | None]:
    """Map an event subject (node, worker or task id) to (task_id, node_id)."""
    if subject in state.assignment:
        return subject, None
    for n in state.nodes:
        if subject == n.node_id:
            hit = state.tasks_on_node(subject)
            return (hit[0] if len(hit) == 1 else None), subject
        if subject in n.worker_ids:
            for task_id, ws in state.assignment.items():
                if subject in ws:
                    return task_id, n.node_id
            return None, n.node_id
    return None, None


def decide(event: ErrorEvent, state: ClusterState | None = None) -> RecoveryAction:
    kind = _ACTION_FOR[event.severity]
    task_id = node_id = None
    if state is not None:
        task_id, node_id = _locate(state, event.subject)
    return RecoveryAction(kind, task_id, node_id, event)


def escalate(event: ErrorEvent, depth: int = 0) -> ErrorEvent:
    if depth >= MAX_ESCALATIONS:
        raise ValueError("escalation limit reached")
    return ErrorEvent(event.time, event.source, event.status_kind, event.subject, event.severity.escalated())


def _drain_target(action: RecoveryAction, state: ClusterState) -> str:
    if action.node_id is not None:
        return action.node_id
    if action.event is not None:
        subject = action.event.subject
        try:
            return state.node(subject).node_id
        except KeyError:
            return state.node_of(subject)
    raise FatalRecoveryError("reconfigure action names no node")


def apply(action: RecoveryAction, state: ClusterState, outcome: Outcome | str,
          tasks: Iterable[str] | None = None) -> tuple[ClusterState, ErrorEvent | None, ReconfigRequest | None]:
    """Carry out ``action``; returns (new state, escalated event, reconfiguration request)."""
    outcome = Outcome(outcome)
    if action.kind is ActionKind.RECONFIGURE_CLUSTER:
        if outcome is Outcome.FAILURE:
            raise FatalRecoveryError(f"reconfiguration failed for {action.node_id or action.event}")
        node_id = _drain_target(action, state)
        hit = frozenset(state.tasks_on_node(node_id))
        drained = state.with_health(node_id, Health.DRAINED)
        lost = set(state.node(node_id).worker_ids)
        kept = {t: tuple(w for w in ws if w not in lost) for t, ws in drained.assignment.items()}
        drained = drained.with_assignment(kept)
        all_tasks = tuple(sorted(set(tasks) if tasks is not None else set(state.assignment)))
        return drained, None, ReconfigRequest("node_fault", node_id, all_tasks, drained.capacity, hit)
    if outcome is Outcome.SUCCESS:
        return state, None, None
    if action.event is None:
        raise ValueError("cannot escalate an action with no originating event")
    return state, escalate(action.event), None


def on_trigger(kind: str, state: ClusterState, subject: str, tasks: Iterable[str]) -> tuple[ClusterState, ReconfigRequest]:
    """Reconfiguration triggers that are not failures: node join, task finish, task launch.

    ``tasks`` is the set of registered tasks before the trigger takes effect.
    """
    tasks = set(tasks)
    if kind == "node_join":
        try:
            node = state.node(subject)
        except KeyError:
            raise RejectedTrigger(f"unknown node {subject}") from None
        if node.health is Health.HEALTHY:
            raise RejectedTrigger(f"node {subject} is already in service")
        state = state.with_health(subject, Health.HEALTHY)
    elif kind == "task_finished":
        if subject not in tasks or subject not in state.assignment:
            raise RejectedTrigger(f"task {subject} is not scheduled")
        tasks.discard(subject)
        state = state.with_assignment({t: ws for t, ws in state.assignment.items() if t != subject})
    elif kind == "task_launched":
        if subject in tasks:
            raise RejectedTrigger(f"task {subject} is already registered")
        tasks.add(subject)
    else:
        raise RejectedTrigger(f"unknown trigger {kind!r}")
    return state, ReconfigRequest(kind, subject, tuple(sorted(tasks)), state.capacity)


@dataclass
class Coordinator:
    """Single-threaded recovery actor writing an audit log as JSON Lines.

    ``attempt`` decides whether a retry or restart works; it receives the
    action and returns an Outcome. By default every attempt succeeds.
    """

    state: ClusterState
    tasks: dict[str, TaskSpec] = field(default_factory=dict)
    log: TextIO | None = None
    attempt: object = None
    records: list[EscalationRecord] = field(default_factory=list)
    requests: list[ReconfigRequest] = field(default_factory=list)

    def _emit(self, t: float, event: ErrorEvent | dict, action: str, outcome: str) -> None:
        if self.log is None:
            return
        payload = event.to_dict() if isinstance(event, ErrorEvent) else event
        self.log.write(json.dumps({"t": t, "event": payload, "action": action, "outcome": outcome},
                                  sort_keys=True) + "\n")

    def _try(self, action: RecoveryAction) -> Outcome:
        if action.kind is ActionKind.RECONFIGURE_CLUSTER or self.attempt is None:
            return Outcome.SUCCESS
        return Outcome(self.attempt(action))

    def _run(self, event: ErrorEvent) -> ReconfigRequest | None:
        depth = 0
        while True:
            action = decide(event, self.state)
            outcome = self._try(action)
            self.state, up, request = apply(action, self.state, outcome, self.tasks or None)
            when = event.time + (REATTEMPT_BACKOFF if action.kind is ActionKind.REATTEMPT_IN_PLACE else 0.0)
            self._emit(when, event, action.kind.value, outcome.value)
            if up is None:
                return request
            self.records.append(EscalationRecord(event, action, outcome, up.severity))
            depth += 1
            if depth > MAX_ESCALATIONS:
                raise AssertionError("escalation did not terminate")
            event = up

    def handle(self, event: ErrorEvent) -> ReconfigRequest | None:
        """Drive one event through the retry, restart, reconfigure ladder."""
        return self.handle_batch([event])

    def handle_batch(self, events: Iterable[ErrorEvent]) -> ReconfigRequest | None:
        """Handle events arriving in one loop step, coalescing node faults into one request."""
        subjects: list[str] = []
        faulted: frozenset[str] = frozenset()
        last = None
        for ev in sorted(events, key=ErrorEvent.sort_key):
            req = self._run(ev)
            if req is not None:
                last = req
                subjects.append(req.subject)
                faulted |= req.faulted
        if last is None:
            return None
        merged = ReconfigRequest("node_fault", ",".join(subjects), last.tasks, self.state.capacity, faulted)
        self.requests.append(merged)
        return merged

    def trigger(self, kind: str, subject: str, t: float = 0.0) -> ReconfigRequest:
        self.state, req = on_trigger(kind, self.state, subject, self.tasks or self.state.assignment)
        self._emit(t, {"trigger": kind, "subject": subject}, "reconfigure_cluster", "requested")
        self.requests.append(req)
        return req


def open_log(path: str | os.PathLike) -> TextIO:
    return open(path, "a")
