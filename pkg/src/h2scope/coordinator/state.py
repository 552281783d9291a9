"""Scheduler state machine for pull-based probe sweeps.

All mutations go through :func:`next_task`, :func:`handle_report` and
:func:`reassign_stragglers`; the master applies them one at a time. Times
are plain floats in seconds from whatever clock the caller uses.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from ..prober import ProbeRecord

BOOTSTRAP_T = 300.0
T_FLOOR = 30.0
MIN_FREE_MEMORY_MB = 500
MAX_CPU_LOAD_PCT = 30.0
DEFAULT_CHUNK = 100


class EmptyInput(ValueError):
    pass


class UnknownTask(KeyError):
    pass


class CoverageMismatch(ValueError):
    """A report whose records do not cover exactly the task's hosts."""


class ReportOutcome(str, enum.Enum):
    ACCEPTED = "accepted"
    DUPLICATE = "duplicate"


@dataclass
class TaskAssignment:
    task_id: str
    hosts: list[str]
    issued_at: float | None = None
    worker_id: str | None = None
    attempt: int = 0
    superseded: bool = False

    def __post_init__(self) -> None:
        if not self.hosts:
            raise ValueError(f"task {self.task_id} has no hosts")


@dataclass
class WorkerHealth:
    worker_id: str
    free_memory_mb: int
    cpu_load_pct: float
    reachable: bool = True
    last_seen: float = 0.0

    @property
    def eligible(self) -> bool:
        return (self.free_memory_mb >= MIN_FREE_MEMORY_MB and self.cpu_load_pct < MAX_CPU_LOAD_PCT
                and self.reachable)


@dataclass
class WorkerReport:
    task_id: str
    worker_id: str
    records: list[ProbeRecord]
    completed_at: float


def chunk_targets(hosts: Sequence[str], chunk_size: int = DEFAULT_CHUNK,
                  prefix: str = "t") -> list[TaskAssignment]:
    """Order-preserving chunks of at most ``chunk_size`` hosts."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if not hosts:
        raise EmptyInput("no target hosts")
    if len(set(hosts)) != len(hosts):
        raise ValueError("target hosts must be deduplicated")
    return [TaskAssignment(f"{prefix}{i // chunk_size:06d}", list(hosts[i:i + chunk_size]))
            for i in range(0, len(hosts), chunk_size)]


@dataclass
class SchedulerState:
    tasks: dict[str, TaskAssignment] = field(default_factory=dict)
    pending: list[str] = field(default_factory=list)
    in_flight: set[str] = field(default_factory=set)
    completed: set[str] = field(default_factory=set)
    # superseded attempts per task, oldest first
    history: dict[str, list[TaskAssignment]] = field(default_factory=dict)
    completion_durations: list[float] = field(default_factory=list)
    bootstrap_t: float = BOOTSTRAP_T
    t_floor: float = T_FLOOR
    reassignments: int = 0
    duplicates: int = 0

    @classmethod
    def from_hosts(cls, hosts: Sequence[str], chunk_size: int = DEFAULT_CHUNK, **kw: Any) -> "SchedulerState":
        state = cls(**kw)
        for task in chunk_targets(hosts, chunk_size):
            state.tasks[task.task_id] = task
            state.pending.append(task.task_id)
        return state

    @property
    def timeout(self) -> float:
        """T: global running mean of completion durations, floored; bootstrap before any completion."""
        if not self.completion_durations:
            return self.bootstrap_t
        mean = math.fsum(self.completion_durations) / len(self.completion_durations)
        return max(self.t_floor, mean)

    @property
    def done(self) -> bool:
        return len(self.completed) == len(self.tasks)

    def host_counts(self) -> tuple[int, int, int]:
        def count(ids: Iterable[str]) -> int:
            return sum(len(self.tasks[t].hosts) for t in ids)
        return count(self.pending), count(self.in_flight), count(self.completed)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tasks": {k: vars(v) for k, v in self.tasks.items()},
            "pending": list(self.pending),
            "in_flight": sorted(self.in_flight),
            "completed": sorted(self.completed),
            "history": {k: [vars(a) for a in v] for k, v in self.history.items()},
            "completion_durations": list(self.completion_durations),
            "bootstrap_t": self.bootstrap_t,
            "t_floor": self.t_floor,
            "reassignments": self.reassignments,
            "duplicates": self.duplicates,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SchedulerState":
        return cls(
            tasks={k: TaskAssignment(**v) for k, v in doc["tasks"].items()},
            pending=list(doc["pending"]),
            in_flight=set(doc["in_flight"]),
            completed=set(doc["completed"]),
            history={k: [TaskAssignment(**a) for a in v] for k, v in doc.get("history", {}).items()},
            completion_durations=[float(d) for d in doc.get("completion_durations", [])],
            bootstrap_t=float(doc.get("bootstrap_t", BOOTSTRAP_T)),
            t_floor=float(doc.get("t_floor", T_FLOOR)),
            reassignments=int(doc.get("reassignments", 0)),
            duplicates=int(doc.get("duplicates", 0)),
        )


def _holders(state: SchedulerState, task_id: str) -> set[str | None]:
    return {a.worker_id for a in state.history.get(task_id, ())}


def next_task(worker: WorkerHealth, state: SchedulerState, now: float) -> TaskAssignment | None:
    """Hand the next pending task to an eligible worker.

    A requeued straggler task goes to a different worker when another task
    is available for this one; a lone eligible worker still gets it.
    """
    if not worker.eligible or not state.pending:
        return None
    pick = next((tid for tid in state.pending if worker.worker_id not in _holders(state, tid)),
                state.pending[0])
    state.pending.remove(pick)
    task = state.tasks[pick]
    task.worker_id = worker.worker_id
    task.issued_at = now
    task.attempt += 1
    state.in_flight.add(pick)
    return task


def _attempt_for(state: SchedulerState, task_id: str, worker_id: str) -> TaskAssignment | None:
    current = state.tasks[task_id]
    if current.worker_id == worker_id and current.issued_at is not None:
        return current
    for stale in reversed(state.history.get(task_id, [])):
        if stale.worker_id == worker_id:
            return stale
    return None


def handle_report(report: WorkerReport, state: SchedulerState) -> ReportOutcome:
    """Apply a report; first writer wins.

    Raises UnknownTask for a task id the scheduler never issued to this
    worker and CoverageMismatch when records and hosts differ (the task then
    stays where it was).
    """
    task = state.tasks.get(report.task_id)
    if task is None:
        raise UnknownTask(report.task_id)
    attempt = _attempt_for(state, report.task_id, report.worker_id)
    if attempt is None:
        raise UnknownTask(f"{report.task_id} was never issued to {report.worker_id}")
    if report.task_id in state.completed:
        state.duplicates += 1
        return ReportOutcome.DUPLICATE
    hosts = [r.host for r in report.records]
    if len(hosts) != len(task.hosts) or set(hosts) != set(task.hosts):
        raise CoverageMismatch(f"{report.task_id}: {len(hosts)} records for {len(task.hosts)} hosts")
    state.in_flight.discard(report.task_id)
    if report.task_id in state.pending:
        # late report from a superseded attempt while the task waits for a new worker
        state.pending.remove(report.task_id)
    state.completed.add(report.task_id)
    assert attempt.issued_at is not None
    state.completion_durations.append(max(0.0, report.completed_at - attempt.issued_at))
    return ReportOutcome.ACCEPTED


def reassign_stragglers(now: float, state: SchedulerState) -> list[TaskAssignment]:
    """Requeue every in-flight task older than T, at the head of the queue.

    The stale assignment is kept in history as superseded so its late report
    can still win. The returned tasks get a new worker and issued_at on the
    next eligible poll.
    """
    limit = state.timeout
    stale_ids = sorted(tid for tid in state.in_flight
                       if state.tasks[tid].issued_at is not None and now - state.tasks[tid].issued_at > limit)
    reissued = []
    for tid in stale_ids:
        task = state.tasks[tid]
        state.history.setdefault(tid, []).append(TaskAssignment(
            tid, list(task.hosts), task.issued_at, task.worker_id, task.attempt, superseded=True))
        task.worker_id = None
        task.issued_at = None
        state.in_flight.discard(tid)
        reissued.append(task)
        state.reassignments += 1
    state.pending[:0] = [t.task_id for t in reissued]
    return reissued
