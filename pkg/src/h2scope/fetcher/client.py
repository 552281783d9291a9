"""Single-connection HTTP/1.1 and HTTP/2 clients over asyncio streams.

Both wrap sans-IO state machines (h11, h2). Neither falls back to the other
protocol; callers decide what an unavailable protocol means.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
from dataclasses import dataclass, field

import h11
import h2.config
import h2.connection
import h2.errors
import h2.events
import h2.exceptions
import h2.settings

from ..net import Transport

log = logging.getLogger(__name__)

_conn_ids = itertools.count(1)


def new_connection_id(prefix: str) -> str:
    return f"{prefix}-{next(_conn_ids)}"


class ProtocolError(Exception):
    """Framing or negotiation failure on an established connection."""


class PushRejected(ProtocolError):
    pass


@dataclass
class Response:
    status: int
    headers: list[tuple[str, str]]
    body: bytes
    protocol: str
    connection_id: str
    pushes_rejected: int = 0

    def header(self, name: str) -> str | None:
        name = name.lower()
        for key, value in self.headers:
            if key == name:
                return value
        return None


class H1Connection:
    protocol = "H1"

    def __init__(self, transport: Transport, authority: str, connection_id: str | None = None):
        self.transport = transport
        self.authority = authority
        self.connection_id = connection_id or new_connection_id("h1")
        self._conn = h11.Connection(our_role=h11.CLIENT)
        self.reusable = True

    async def request(self, method: str, target: str, headers: list[tuple[str, str]] | None = None) -> Response:
        if not self.reusable:
            raise ProtocolError("connection not reusable")
        hdrs = [("host", self.authority)] + list(headers or [])
        writer = self.transport.writer
        try:
            writer.write(self._conn.send(h11.Request(method=method, target=target, headers=hdrs)))
            writer.write(self._conn.send(h11.EndOfMessage()))
            await writer.drain()
            status = 0
            resp_headers: list[tuple[str, str]] = []
            body = bytearray()
            while True:
                event = self._conn.next_event()
                if event is h11.NEED_DATA:
                    data = await self.transport.reader.read(65536)
                    self._conn.receive_data(data)
                    continue
                if isinstance(event, h11.Response):
                    status = event.status_code
                    resp_headers = [(k.decode().lower(), v.decode("latin-1")) for k, v in event.headers]
                elif isinstance(event, h11.InformationalResponse):
                    continue
                elif isinstance(event, h11.Data):
                    body += event.data
                elif isinstance(event, h11.EndOfMessage):
                    break
                elif isinstance(event, h11.ConnectionClosed):
                    raise ProtocolError("connection closed mid-response")
        except h11.RemoteProtocolError as exc:
            self.reusable = False
            raise ProtocolError(str(exc)) from exc
        except (ConnectionError, OSError) as exc:
            self.reusable = False
            raise ProtocolError(f"connection lost: {exc}") from exc
        except BaseException:
            self.reusable = False
            raise
        if self._conn.our_state is h11.DONE and self._conn.their_state is h11.DONE:
            self._conn.start_next_cycle()
        else:
            self.reusable = False
        return Response(status, resp_headers, bytes(body), self.protocol, self.connection_id)

    def close(self) -> None:
        self.reusable = False
        self.transport.close()


@dataclass
class _Stream:
    done: asyncio.Future
    status: int = 0
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytearray = field(default_factory=bytearray)


class H2Connection:
    """HTTP/2 client multiplexing concurrent requests on one connection.

    Server push is disabled in SETTINGS; any pushed stream that still arrives
    is reset and counted in ``pushes_rejected``.
    """

    protocol = "H2"

    def __init__(self, transport: Transport, authority: str, scheme: str = "https",
                 connection_id: str | None = None):
        self.transport = transport
        self.authority = authority
        self.scheme = scheme
        self.connection_id = connection_id or new_connection_id("h2")
        cfg = h2.config.H2Configuration(client_side=True, header_encoding="utf-8")
        self._conn = h2.connection.H2Connection(config=cfg)
        self._streams: dict[int, _Stream] = {}
        self._write_lock = asyncio.Lock()
        self._reader_task: asyncio.Task | None = None
        self._closed: Exception | None = None
        self._slots = asyncio.Semaphore(100)
        self.pushes_rejected = 0

    @property
    def usable(self) -> bool:
        return self._closed is None

    async def start(self) -> None:
        self._conn.initiate_connection()
        self._conn.update_settings({h2.settings.SettingCodes.ENABLE_PUSH: 0})
        await self._flush()
        self._reader_task = asyncio.get_running_loop().create_task(self._read_loop())

    async def _flush(self) -> None:
        data = self._conn.data_to_send()
        if data:
            async with self._write_lock:
                self.transport.writer.write(data)
                await self.transport.writer.drain()

    async def request(self, method: str, path: str, headers: list[tuple[str, str]] | None = None) -> Response:
        if self._closed is not None:
            raise ProtocolError(f"connection closed: {self._closed}")
        async with self._slots:
            loop = asyncio.get_running_loop()
            stream_id = self._conn.get_next_available_stream_id()
            stream = _Stream(loop.create_future())
            self._streams[stream_id] = stream
            hdrs = [(":method", method), (":scheme", self.scheme), (":authority", self.authority),
                    (":path", path)] + [(k.lower(), v) for k, v in (headers or [])]
            try:
                self._conn.send_headers(stream_id, hdrs, end_stream=True)
                await self._flush()
            except (h2.exceptions.ProtocolError, ConnectionError, OSError) as exc:
                self._streams.pop(stream_id, None)
                raise ProtocolError(str(exc)) from exc
            try:
                await stream.done
            finally:
                self._streams.pop(stream_id, None)
            return Response(stream.status, stream.headers, bytes(stream.body), self.protocol,
                            self.connection_id, self.pushes_rejected)

    async def _read_loop(self) -> None:
        reader = self.transport.reader
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    raise ProtocolError("connection closed by peer")
                try:
                    events = self._conn.receive_data(data)
                except h2.exceptions.ProtocolError as exc:
                    raise ProtocolError(f"h2 framing error: {exc}") from exc
                for event in events:
                    self._handle(event)
                await self._flush()
        except asyncio.CancelledError:
            self._fail(ProtocolError("connection closed"))
            raise
        except Exception as exc:
            self._fail(exc if isinstance(exc, ProtocolError) else ProtocolError(str(exc)))

    def _handle(self, event: h2.events.Event) -> None:
        if isinstance(event, h2.events.ResponseReceived):
            stream = self._streams.get(event.stream_id)
            if stream is not None:
                for name, value in event.headers:
                    if name == ":status":
                        stream.status = int(value)
                    else:
                        stream.headers.append((name, value))
        elif isinstance(event, h2.events.DataReceived):
            stream = self._streams.get(event.stream_id)
            if stream is not None:
                stream.body += event.data
            self._conn.acknowledge_received_data(event.flow_controlled_length, event.stream_id)
        elif isinstance(event, h2.events.StreamEnded):
            stream = self._streams.get(event.stream_id)
            if stream is not None and not stream.done.done():
                stream.done.set_result(None)
        elif isinstance(event, h2.events.StreamReset):
            stream = self._streams.get(event.stream_id)
            if stream is not None and not stream.done.done():
                stream.done.set_exception(ProtocolError(f"stream reset, code {event.error_code}"))
        elif isinstance(event, h2.events.PushedStreamReceived):
            self.pushes_rejected += 1
            self._conn.reset_stream(event.pushed_stream_id, h2.errors.ErrorCodes.REFUSED_STREAM)
        elif isinstance(event, h2.events.RemoteSettingsChanged):
            limit = self._conn.remote_settings.max_concurrent_streams
            if limit and limit < 100:
                self._slots = asyncio.Semaphore(limit)
        elif isinstance(event, h2.events.ConnectionTerminated):
            self._fail(ProtocolError(f"GOAWAY, code {event.error_code}"))

    def _fail(self, exc: Exception) -> None:
        if self._closed is None:
            self._closed = exc
        for stream in list(self._streams.values()):
            if not stream.done.done():
                stream.done.set_exception(exc)

    def close(self) -> None:
        if self._closed is None:
            self._closed = ProtocolError("closed locally")
        try:
            self._conn.close_connection()
            self.transport.writer.write(self._conn.data_to_send())
        except Exception:
            pass
        if self._reader_task is not None:
            self._reader_task.cancel()
        self.transport.close()
