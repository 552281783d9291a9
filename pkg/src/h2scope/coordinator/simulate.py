"""In-process cluster harness with injected faults, on an accelerated clock."""

from __future__ import annotations

import asyncio
import random
import tempfile
import time
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from .._util import utc_now
from ..prober import Mechanism, ProbeRecord, Upgrade
from .clock import ScaledClock
from .master import Master
from .worker import Worker

HEALTHY = {"free_memory_mb": 2048, "cpu_load_pct": 5.0, "reachable": True}


def synthetic_record(host: str) -> ProbeRecord:
    """A deterministic stand-in for a real probe of ``host``."""
    h = zlib.crc32(host.encode())
    announced = ["h2", "http/1.1"] if h % 10 == 0 else ["http/1.1"]
    return ProbeRecord(host=host, port=443, timestamp=utc_now(), mechanism=Mechanism.ALPN,
                       announced=announced, negotiated=announced[0], cleartext_upgrade=Upgrade.UNSUPPORTED,
                       handshakes=len(announced) + 1)


class SilentWorker(Worker):
    """Takes a task and never reports (a crashed or wedged node)."""

    async def probe(self, hosts: Sequence[str]) -> list[ProbeRecord]:
        await asyncio.Event().wait()
        return []


class DuplicatingWorker(Worker):
    """Sends every report twice."""

    async def submit(self, report: dict[str, Any]) -> list[dict[str, Any]]:
        return [await self._exchange(report), await self._exchange(report)]


@dataclass
class SimulationResult:
    hosts: int
    persisted: Counter
    reassigned: list[tuple[str, int, str | None]]
    duplicates: int
    timeout: float
    elapsed: float
    out_dir: Path
    acks: dict[str, list[tuple[str, str]]] = field(default_factory=dict)

    @property
    def lost(self) -> int:
        return sum(1 for n in self.persisted.values() if n == 0)

    @property
    def exactly_once(self) -> bool:
        return len(self.persisted) == self.hosts and all(n == 1 for n in self.persisted.values())


async def run_cluster(n_hosts: int = 1000, n_workers: int = 5, *, speed: float = 100.0,
                      task_seconds: tuple[float, float] = (20.0, 40.0), slow_factor: float = 4.0,
                      out_dir: str | Path | None = None, seed: int = 0, deadline: float = 55.0) -> SimulationResult:
    """Worker 0 is silent, worker 1 duplicates its reports, worker 2 is slow on its first task."""
    if n_workers < 3:
        raise ValueError("the fault mix needs at least 3 workers")
    out = Path(out_dir) if out_dir else Path(tempfile.mkdtemp(prefix="h2scope-sim-"))
    hosts = [f"host{i:05d}.test" for i in range(n_hosts)]
    clock = ScaledClock(speed)
    rng = random.Random(seed)
    started = time.monotonic()
    master = Master(hosts, out, clock=clock, tick=1.0, retry_after=2.0)
    port = await master.start()
    slow_once = {"w2": True}

    def make_probe(wid: str):
        async def probe(batch: Sequence[str]) -> list[ProbeRecord]:
            duration = rng.uniform(*task_seconds)
            if slow_once.get(wid):
                slow_once[wid] = False
                duration *= slow_factor
            await clock.sleep(duration)
            return [synthetic_record(h) for h in batch]
        return probe

    workers: list[Worker] = []
    for i in range(n_workers):
        cls = SilentWorker if i == 0 else DuplicatingWorker if i == 1 else Worker
        wid = f"w{i}"
        workers.append(cls("127.0.0.1", port, wid, probe=make_probe(wid), health=lambda: dict(HEALTHY),
                           clock=clock))
    # the silent worker joins first so it is guaranteed to hold a task
    silent = asyncio.create_task(workers[0].run())
    while not master.state.in_flight:
        await asyncio.sleep(0.005)
    runs = [asyncio.create_task(w.run()) for w in workers[1:]]
    try:
        finished = await master.wait_done(timeout=deadline)
        if not finished:
            raise TimeoutError("simulated cluster did not finish before the deadline")
        await asyncio.wait_for(asyncio.gather(*runs), timeout=10)
    finally:
        silent.cancel()
        for r in runs:
            r.cancel()
        await asyncio.gather(silent, *runs, return_exceptions=True)
        await master.stop()

    persisted = Counter({h: 0 for h in hosts})
    for rec in master.store.records():
        persisted[rec["host"]] += 1
    return SimulationResult(
        hosts=n_hosts, persisted=persisted, reassigned=list(master.reassigned),
        duplicates=master.state.duplicates, timeout=master.state.timeout,
        elapsed=time.monotonic() - started, out_dir=out,
        acks={w.worker_id: list(w.acks) for w in workers},
    )


def simulate(**kw: Any) -> SimulationResult:
    return asyncio.run(run_cluster(**kw))
