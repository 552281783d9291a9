"""Durable master state: an append-only result log plus a compacted scheduler snapshot.

Each accepted report is one fsynced NDJSON line. The snapshot records the
scheduler state together with how many log lines it already reflects, so
recovery loads the snapshot and replays only the tail of the log.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Iterator, Sequence

from .._util import SCHEMA_VERSION, check_schema, dumps
from .state import SchedulerState, TaskAssignment

log = logging.getLogger(__name__)

LOG_NAME = "results.ndjson"
SNAPSHOT_NAME = "state.json"


class ResultStore:
    def __init__(self, directory: str | os.PathLike, snapshot_every: int = 50):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.dir / LOG_NAME
        self.snapshot_path = self.dir / SNAPSHOT_NAME
        self.snapshot_every = snapshot_every
        self.lines = 0
        self._since_snapshot = 0
        self._fh = None

    # -- setup / recovery -------------------------------------------------

    def open(self, hosts: Sequence[str], chunk_size: int = 100, **state_kw: Any) -> SchedulerState:
        """Fresh state for ``hosts``, or the recovered one if this directory has history."""
        if self.snapshot_path.exists() or self.log_path.exists():
            state = self.recover()
            known = [h for tid in sorted(state.tasks) for h in state.tasks[tid].hosts]
            if known != list(hosts):
                raise ValueError(f"{self.dir} holds a run over a different target list")
        else:
            state = SchedulerState.from_hosts(hosts, chunk_size, **state_kw)
        self._fh = open(self.log_path, "a", encoding="utf-8")
        self.snapshot(state)
        return state

    def recover(self) -> SchedulerState:
        doc = json.loads(self.snapshot_path.read_text(encoding="utf-8"))
        check_schema(doc, str(self.snapshot_path))
        state = SchedulerState.from_dict(doc["state"])
        lines = self._read_log()
        for entry in lines[doc["log_lines"]:]:
            tid = entry["task_id"]
            if tid in state.completed:
                continue
            state.pending = [t for t in state.pending if t != tid]
            state.in_flight.discard(tid)
            state.completed.add(tid)
            state.completion_durations.append(float(entry["duration"]))
        # assignments in flight at crash time go back to the queue; their late reports still count
        for tid in sorted(state.in_flight):
            task = state.tasks[tid]
            state.history.setdefault(tid, []).append(TaskAssignment(
                tid, list(task.hosts), task.issued_at, task.worker_id, task.attempt, superseded=True))
            task.worker_id = task.issued_at = None
            state.pending.insert(0, tid)
        state.in_flight.clear()
        self.lines = len(lines)
        log.info("recovered %d/%d completed tasks from %s", len(state.completed), len(state.tasks), self.dir)
        return state

    def _read_log(self) -> list[dict[str, Any]]:
        if not self.log_path.exists():
            return []
        entries = []
        good_bytes = 0
        with open(self.log_path, "rb") as fh:
            for raw in fh:
                try:
                    entries.append(check_schema(json.loads(raw), str(self.log_path)))
                except ValueError:
                    if raw.endswith(b"\n"):
                        raise
                    log.warning("dropping torn final line of %s", self.log_path)
                    break
                good_bytes += len(raw)
        with open(self.log_path, "r+b") as fh:
            fh.truncate(good_bytes)
        return entries

    # -- writes -------------------------------------------------------------

    def append_result(self, task_id: str, worker_id: str, records: list[Any], completed_at: float,
                      duration: float) -> None:
        assert self._fh is not None, "store not opened"
        self._fh.write(dumps({
            "schema_version": SCHEMA_VERSION, "task_id": task_id, "worker_id": worker_id,
            "completed_at": completed_at, "duration": duration, "records": records,
        }) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self.lines += 1
        self._since_snapshot += 1

    def maybe_snapshot(self, state: SchedulerState) -> None:
        if self._since_snapshot >= self.snapshot_every:
            self.snapshot(state)

    def snapshot(self, state: SchedulerState) -> None:
        tmp = self.snapshot_path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(dumps({"schema_version": SCHEMA_VERSION, "log_lines": self.lines,
                            "state": state.to_dict()}))
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.snapshot_path)
        self._since_snapshot = 0

    def close(self, state: SchedulerState | None = None) -> None:
        if state is not None and self._fh is not None:
            self.snapshot(state)
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    # -- reads --------------------------------------------------------------

    def records(self) -> Iterator[dict[str, Any]]:
        """Every persisted probe record, one per host of each completed task."""
        for entry in self._read_log():
            yield from entry["records"]
