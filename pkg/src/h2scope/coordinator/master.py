"""The master: an asyncio server that owns the scheduler state and the result store."""

from __future__ import annotations

import asyncio
import logging
import os
from typing import Any, Sequence

from ..prober import ProbeRecord
from . import wire
from .clock import WallClock
from .state import (
    CoverageMismatch, ReportOutcome, SchedulerState, UnknownTask, WorkerHealth, WorkerReport, handle_report,
    next_task, reassign_stragglers,
)
from .store import ResultStore

log = logging.getLogger(__name__)


class Master:
    """Serves tasks to pulling workers and persists their reports exactly once.

    Every scheduler mutation runs on the event loop without an intervening
    await, so mutations are totally ordered.
    """

    def __init__(self, hosts: Sequence[str], out_dir: str | os.PathLike, *, chunk_size: int = 100,
                 clock: Any = None, tick: float = 1.0, retry_after: float = 5.0, snapshot_every: int = 50,
                 **state_kw: Any):
        self.clock = clock or WallClock()
        self.store = ResultStore(out_dir, snapshot_every=snapshot_every)
        self.state: SchedulerState = self.store.open(list(hosts), chunk_size, **state_kw)
        self.tick = tick
        self.retry_after = retry_after
        self.workers: dict[str, WorkerHealth] = {}
        self.reassigned: list[tuple[str, int, str | None]] = []  # (task_id, attempt, stale worker)
        self.rejected = 0
        self._done = asyncio.Event()
        self._server: asyncio.base_events.Server | None = None
        self._writers: set[asyncio.StreamWriter] = set()
        self._ticker: asyncio.Task | None = None
        self.port = 0
        if self.state.done:
            self._done.set()

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        self._server = await asyncio.start_server(self._on_connection, host, port)
        self.port = self._server.sockets[0].getsockname()[1]
        self._ticker = asyncio.create_task(self._reassign_loop())
        log.info("master listening on %s:%d, %d tasks", host, self.port, len(self.state.tasks))
        return self.port

    async def wait_done(self, timeout: float | None = None) -> bool:
        try:
            await asyncio.wait_for(self._done.wait(), timeout)
        except asyncio.TimeoutError:
            return False
        return True

    async def stop(self) -> None:
        if self._ticker is not None:
            self._ticker.cancel()
            await asyncio.gather(self._ticker, return_exceptions=True)
        if self._server is not None:
            self._server.close()
            for w in list(self._writers):
                w.close()
            await self._server.wait_closed()
            self._server = None
        self.store.close(self.state)

    # -- scheduling ----------------------------------------------------------

    async def _reassign_loop(self) -> None:
        while not self._done.is_set():
            await self.clock.sleep(self.tick)
            for task in reassign_stragglers(self.clock.now(), self.state):
                stale = self.state.history[task.task_id][-1]
                self.reassigned.append((task.task_id, stale.attempt, stale.worker_id))
                log.info("reassigning %s from %s after T=%.1fs", task.task_id, stale.worker_id,
                         self.state.timeout)

    def _health(self, msg: dict[str, Any]) -> WorkerHealth:
        h = msg.get("health") or {}
        health = WorkerHealth(
            worker_id=msg["worker_id"],
            free_memory_mb=int(h.get("free_memory_mb", 0)),
            cpu_load_pct=float(h.get("cpu_load_pct", 100.0)),
            reachable=bool(h.get("reachable", False)),
            last_seen=self.clock.now(),
        )
        self.workers[health.worker_id] = health
        return health

    def _assign(self, health: WorkerHealth, **extra: Any) -> dict[str, Any]:
        if self.state.done:
            return wire.message("bye", health.worker_id, reason="complete", **extra)
        task = next_task(health, self.state, self.clock.now())
        if task is None:
            return wire.message("task", health.worker_id, task=None, retry_after=self.retry_after,
                                eligible=health.eligible, **extra)
        return wire.message("task", health.worker_id, task={
            "task_id": task.task_id, "hosts": task.hosts, "attempt": task.attempt, "issued_at": task.issued_at,
        }, timeout=self.state.timeout, **extra)

    def _report(self, msg: dict[str, Any]) -> tuple[str, str | None]:
        raw = msg.get("records") or []
        try:
            records = [ProbeRecord.from_dict(r) for r in raw]
        except (KeyError, TypeError, ValueError) as exc:
            self.rejected += 1
            return "rejected", f"malformed records: {exc}"
        report = WorkerReport(str(msg.get("task_id")), msg["worker_id"], records, self.clock.now())
        try:
            outcome = handle_report(report, self.state)
        except (UnknownTask, CoverageMismatch) as exc:
            self.rejected += 1
            log.warning("rejected report from %s: %s", report.worker_id, exc)
            return "rejected", str(exc)
        if outcome is ReportOutcome.ACCEPTED:
            self.store.append_result(report.task_id, report.worker_id, raw, report.completed_at,
                                     self.state.completion_durations[-1])
            self.store.maybe_snapshot(self.state)
            if self.state.done:
                self._done.set()
        return outcome.value, None

    # -- connections -----------------------------------------------------------

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self._writers.add(writer)
        try:
            while True:
                msg = await wire.recv(reader)
                if msg is None or msg["kind"] == "bye":
                    return
                if msg["kind"] == "hello":
                    reply = self._assign(self._health(msg))
                elif msg["kind"] == "report":
                    health = self._health(msg)
                    ack, reason = self._report(msg)
                    reply = self._assign(health, ack=ack, ack_task_id=msg.get("task_id"), ack_reason=reason)
                else:
                    await wire.send(writer, wire.message("bye", msg["worker_id"], reason="unexpected message"))
                    return
                await wire.send(writer, reply)
        except wire.WireError as exc:
            log.warning("dropping worker connection: %s", exc)
        except (ConnectionError, asyncio.CancelledError):
            pass
        except Exception:
            log.exception("worker connection failed")
        finally:
            self._writers.discard(writer)
            writer.close()
