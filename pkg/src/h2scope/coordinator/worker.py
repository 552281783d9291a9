"""A worker: pulls host lists from the master, probes them and reports back."""

from __future__ import annotations

import asyncio
import logging
import socket
from collections import deque
from typing import Any, Awaitable, Callable, Sequence

import psutil

from ..prober import ProbeConfig, ProbeRecord, probe_many
from . import wire
from .clock import WallClock

log = logging.getLogger(__name__)

ProbeFn = Callable[[Sequence[str]], Awaitable[list[ProbeRecord]]]


def local_health() -> dict[str, Any]:
    """Self-reported health; the master trusts it."""
    return {
        "free_memory_mb": psutil.virtual_memory().available // (1024 * 1024),
        "cpu_load_pct": psutil.cpu_percent(interval=None),
        "reachable": True,
    }


class Worker:
    def __init__(self, master_host: str, master_port: int, worker_id: str | None = None, *,
                 parallel: int = 20, probe_cfg: ProbeConfig | None = None, probe: ProbeFn | None = None,
                 health: Callable[[], dict[str, Any]] | None = None, clock: Any = None):
        self.master = (master_host, master_port)
        self.worker_id = worker_id or f"{socket.gethostname()}-{id(self):x}"
        self.parallel = parallel
        self.probe_cfg = probe_cfg or ProbeConfig()
        self._probe = probe
        self.health = health or local_health
        self.clock = clock or WallClock()
        self.completed = 0
        self.acks: list[tuple[str, str]] = []
        self._queue: deque[dict[str, Any]] = deque()
        self._retry_after = 5.0
        self._finished = False
        if health is None:
            psutil.cpu_percent(interval=None)  # prime the sampler; the first reading is meaningless

    async def probe(self, hosts: Sequence[str]) -> list[ProbeRecord]:
        if self._probe is not None:
            return await self._probe(hosts)
        return await probe_many(hosts, self.probe_cfg, parallel=self.parallel)

    async def _exchange(self, msg: dict[str, Any]) -> dict[str, Any]:
        await wire.send(self._writer, msg)
        reply = await wire.recv(self._reader)
        if reply is None:
            raise ConnectionError("master closed the connection")
        return reply

    async def submit(self, report: dict[str, Any]) -> list[dict[str, Any]]:
        return [await self._exchange(report)]

    def _handle(self, reply: dict[str, Any]) -> None:
        if "ack" in reply:
            self.acks.append((reply.get("ack_task_id"), reply["ack"]))
        if reply["kind"] == "bye":
            self._finished = True
        elif reply["kind"] == "task":
            if reply.get("task"):
                self._queue.append(reply["task"])
            else:
                self._retry_after = float(reply.get("retry_after", self._retry_after))

    async def _connect(self, wait: float) -> None:
        # the master may still be starting; keep trying for ``wait`` seconds
        deadline = self.clock.now() + wait
        while True:
            try:
                self._reader, self._writer = await asyncio.open_connection(*self.master)
                return
            except OSError:
                if self.clock.now() >= deadline:
                    raise
                await self.clock.sleep(0.2)

    async def run(self, connect_wait: float = 10.0) -> int:
        """Work until the master says bye; returns the number of reports sent."""
        await self._connect(connect_wait)
        try:
            self._handle(await self._exchange(wire.message("hello", self.worker_id, health=self.health())))
            while True:
                if self._queue:
                    task = self._queue.popleft()
                    records = await self.probe(task["hosts"])
                    report = wire.message("report", self.worker_id, task_id=task["task_id"],
                                          records=records, health=self.health())
                    for reply in await self.submit(report):
                        self._handle(reply)
                    self.completed += 1
                elif self._finished:
                    break
                else:
                    await self.clock.sleep(self._retry_after)
                    self._handle(await self._exchange(wire.message("hello", self.worker_id,
                                                                   health=self.health())))
            try:
                await wire.send(self._writer, wire.message("bye", self.worker_id))
            except ConnectionError:
                pass
        finally:
            self._writer.close()
        return self.completed
