"""In-process network emulation for fixture benchmarks.

:class:`LinkProxy` is a TCP forwarder placed between the client and a
fixture server. All proxies sharing one :class:`EmulatedLink` share its
bottleneck, the way every connection of a page load shares one access link.
The model works on raw bytes below TLS, per direction:

* bandwidth: segments (MSS payload + 40 B header) serialise FIFO through the
  shared bottleneck;
* delay: half of the added RTT is applied in each direction;
* loss: each segment is lost independently. A loss with at least three
  segments queued behind it on the same connection is repaired by fast
  retransmit (one RTT); otherwise it waits out a retransmission timeout.
  Delivery per connection stays in order, so a loss head-of-line blocks
  everything behind it on that connection;
* connection setup: SYN and SYN/ACK cost one RTT; losing either costs the
  initial 1 s retransmission timeout.

Congestion control is not modelled.
"""

from __future__ import annotations

import asyncio
import logging
import random
from dataclasses import dataclass, replace

log = logging.getLogger(__name__)

MSS = 1460
HEADER_BYTES = 40
RTO_MIN = 0.2
SYN_RTO = 1.0
DUPACK_THRESHOLD = 3


@dataclass(frozen=True)
class LinkProfile:
    bandwidth_kbps: int | None = None
    extra_delay_ms: float = 0.0
    loss_pct: float = 0.0
    base_rtt_ms: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_pct <= 100.0:
            raise ValueError("loss_pct must be within [0, 100]")
        if self.bandwidth_kbps is not None and self.bandwidth_kbps <= 0:
            raise ValueError("bandwidth_kbps must be positive")

    @property
    def rtt(self) -> float:
        return (self.base_rtt_ms + self.extra_delay_ms) / 1000.0


class _Direction:
    def __init__(self) -> None:
        self.free_at = 0.0

    def transmit(self, nbytes: int, ready: float, bandwidth_kbps: int | None) -> float:
        """Reserve the bottleneck for ``nbytes`` no earlier than ``ready``; returns finish time."""
        if bandwidth_kbps is None:
            return ready
        start = max(ready, self.free_at)
        self.free_at = start + nbytes * 8 / (bandwidth_kbps * 1000.0)
        return self.free_at


class EmulatedLink:
    def __init__(self, profile: LinkProfile | None = None, seed: int | None = None):
        self.profile = profile or LinkProfile()
        self.rng = random.Random(seed)
        self.down = _Direction()
        self.up = _Direction()
        self.segments = 0
        self.losses = 0

    def configure(self, profile: LinkProfile, seed: int | None = None) -> None:
        self.profile = profile
        if seed is not None:
            self.rng.seed(seed)
        self.down.free_at = self.up.free_at = 0.0

    def update(self, **changes: object) -> None:
        self.profile = replace(self.profile, **changes)

    def lost(self) -> bool:
        p = self.profile.loss_pct
        hit = p > 0 and self.rng.random() < p / 100.0
        if hit:
            self.losses += 1
        return hit

    def setup_delay(self) -> float:
        rtt = self.profile.rtt
        return rtt + sum(SYN_RTO for _ in range(2) if self.lost())


class LinkProxy:
    """Forward ``listen port -> backend`` through an :class:`EmulatedLink`."""

    def __init__(self, link: EmulatedLink, backend_port: int, backend_host: str = "127.0.0.1"):
        self.link = link
        self.backend = (backend_host, backend_port)
        self.port = 0
        self.connections = 0
        self._server: asyncio.base_events.Server | None = None
        self._tasks: set[asyncio.Task] = set()

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        self._server = await asyncio.start_server(self._on_client, host, port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self.port

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        for task in list(self._tasks):
            task.cancel()

    async def _on_client(self, c_reader: asyncio.StreamReader, c_writer: asyncio.StreamWriter) -> None:
        self.connections += 1
        task = asyncio.current_task()
        if task is not None:
            self._tasks.add(task)
        try:
            await asyncio.sleep(self.link.setup_delay())
            s_reader, s_writer = await asyncio.open_connection(*self.backend)
        except (OSError, asyncio.CancelledError):
            c_writer.close()
            if task is not None:
                self._tasks.discard(task)
            return
        try:
            await asyncio.gather(
                self._pump(c_reader, s_writer, self.link.up),
                self._pump(s_reader, c_writer, self.link.down),
            )
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            for w in (s_writer, c_writer):
                try:
                    w.close()
                except Exception:
                    pass
            if task is not None:
                self._tasks.discard(task)

    async def _pump(self, src: asyncio.StreamReader, dst: asyncio.StreamWriter, direction: _Direction) -> None:
        loop = asyncio.get_running_loop()
        queue: asyncio.Queue[tuple[float, bytes | None]] = asyncio.Queue()

        async def schedule() -> None:
            last_delivery = 0.0
            while True:
                data = await src.read(65536)
                now = loop.time()
                if not data:
                    await queue.put((last_delivery, None))
                    return
                profile = self.link.profile
                one_way = profile.rtt / 2
                segments = [data[i:i + MSS] for i in range(0, len(data), MSS)]
                for idx, seg in enumerate(segments):
                    self.link.segments += 1
                    finish = direction.transmit(len(seg) + HEADER_BYTES, now, profile.bandwidth_kbps)
                    while self.link.lost():
                        behind = len(segments) - idx - 1
                        if behind >= DUPACK_THRESHOLD:
                            penalty = profile.rtt
                        else:
                            penalty = max(RTO_MIN, 2 * profile.rtt)
                        finish = direction.transmit(len(seg) + HEADER_BYTES, finish + penalty,
                                                    profile.bandwidth_kbps)
                    delivery = max(finish + one_way, last_delivery)
                    last_delivery = delivery
                    await queue.put((delivery, seg))

        async def deliver() -> None:
            while True:
                when, seg = await queue.get()
                wait = when - loop.time()
                if wait > 0:
                    await asyncio.sleep(wait)
                if seg is None:
                    if dst.can_write_eof():
                        dst.write_eof()
                    return
                dst.write(seg)
                await dst.drain()

        producer = loop.create_task(schedule())
        try:
            await deliver()
        finally:
            producer.cancel()
