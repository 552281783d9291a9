"""Master/worker orchestration of large probe sweeps."""

from .state import (
    BOOTSTRAP_T, T_FLOOR, CoverageMismatch, EmptyInput, ReportOutcome, SchedulerState, TaskAssignment,
    UnknownTask, WorkerHealth, WorkerReport, chunk_targets, handle_report, next_task, reassign_stragglers,
)

__all__ = [
    "BOOTSTRAP_T", "T_FLOOR", "CoverageMismatch", "EmptyInput", "ReportOutcome", "SchedulerState",
    "TaskAssignment", "UnknownTask", "WorkerHealth", "WorkerReport", "chunk_targets", "handle_report",
    "next_task", "reassign_stragglers",
]
