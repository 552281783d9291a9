"""Hermetic HTTP/1.1 + HTTP/2 test servers.

One :class:`FixtureServer` listens on one port and serves any number of
virtual hosts, routed by SNI-independent Host / ``:authority``. TLS servers
announce a configurable ALPN list in server-preference order; cleartext
servers optionally accept the h2c upgrade and prior-knowledge h2.
"""

from __future__ import annotations

import asyncio
import logging
import ssl
import threading
from dataclasses import dataclass, field
from typing import Awaitable, Callable, Mapping, Sequence, TypeVar

import h11
import h2.config
import h2.connection
import h2.events
import h2.exceptions

from .certs import self_signed

log = logging.getLogger(__name__)

H2_PREFACE = b"PRI * HTTP/2.0\r\n\r\nSM\r\n\r\n"
T = TypeVar("T")


@dataclass
class Resource:
    status: int = 200
    body: bytes = b""
    content_type: str = "text/html; charset=utf-8"
    headers: list[tuple[str, str]] = field(default_factory=list)


def redirect(location: str, status: int = 301) -> Resource:
    return Resource(status=status, body=b"", content_type="text/plain", headers=[("location", location)])


Sites = Mapping[str, Mapping[str, Resource]]


@dataclass
class ServerStats:
    connections: int = 0
    requests: int = 0
    negotiated: list[str | None] = field(default_factory=list)


class FixtureServer:
    def __init__(
        self,
        sites: Sites,
        *,
        tls: bool = True,
        alpn: Sequence[str] | None = ("h2", "http/1.1"),
        h2c_upgrade: bool = False,
        h2_prior_knowledge: bool = False,
        broken_h2: bool = False,
        organization: str = "H2scope Fixture Org",
        default_host: str | None = None,
    ):
        self.sites = {host.lower(): dict(routes) for host, routes in sites.items()}
        self.tls = tls
        self.alpn = list(alpn) if alpn else []
        self.h2c_upgrade = h2c_upgrade
        self.h2_prior_knowledge = h2_prior_knowledge
        self.broken_h2 = broken_h2
        self.organization = organization
        self.default_host = default_host
        self.stats = ServerStats()
        self.port = 0
        self._server: asyncio.base_events.Server | None = None

    def _ssl_context(self) -> ssl.SSLContext:
        cert, key = self_signed(self.organization)
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        ctx.load_cert_chain(cert, key)
        if self.alpn:
            ctx.set_alpn_protocols(self.alpn)
        return ctx

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        ssl_ctx = self._ssl_context() if self.tls else None
        self._server = await asyncio.start_server(self._on_connection, host, port, ssl=ssl_ctx)
        self.port = self._server.sockets[0].getsockname()[1]
        return self.port

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    def lookup(self, authority: str, path: str) -> Resource:
        host = authority.rsplit(":", 1)[0] if not authority.startswith("[") else authority
        host = host.lower()
        routes = self.sites.get(host)
        if routes is None and self.default_host is not None:
            routes = self.sites.get(self.default_host)
        if routes is None:
            return Resource(status=421, body=b"misdirected", content_type="text/plain")
        path = path.split("?", 1)[0] or "/"
        return routes.get(path) or Resource(status=404, body=b"not found", content_type="text/plain")

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.stats.connections += 1
        try:
            if self.tls:
                sslobj = writer.get_extra_info("ssl_object")
                selected = sslobj.selected_alpn_protocol() if sslobj else None
                self.stats.negotiated.append(selected)
                if selected is not None and (selected == "h2" or selected.startswith("h2-")):
                    if self.broken_h2:
                        writer.write(b"\x00\x00\x05\xff\x00\x00\x00\x00\x00garbage-not-a-frame")
                        await writer.drain()
                        return
                    await self._serve_h2(reader, writer)
                else:
                    await self._serve_h1(reader, writer)
            else:
                head = await reader.read(len(H2_PREFACE))
                if head == H2_PREFACE and self.h2_prior_knowledge:
                    await self._serve_h2(reader, writer, preface=head)
                else:
                    await self._serve_h1(reader, writer, initial=head)
        except (ConnectionError, asyncio.IncompleteReadError, ssl.SSLError):
            pass
        except Exception:  # pragma: no cover - fixture diagnostics only
            log.exception("fixture connection failed")
        finally:
            try:
                writer.close()
            except Exception:
                pass

    async def _serve_h1(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                        initial: bytes = b"") -> None:
        conn = h11.Connection(our_role=h11.SERVER)
        if initial:
            conn.receive_data(initial)
        while True:
            event = conn.next_event()
            if event is h11.NEED_DATA:
                conn.receive_data(await reader.read(65536))
                continue
            if isinstance(event, h11.ConnectionClosed) or event is h11.PAUSED:
                return
            if isinstance(event, h11.Request):
                headers = {k.decode().lower(): v.decode("latin-1") for k, v in event.headers}
                authority = headers.get("host", "")
                path = event.target.decode("latin-1")
                # drain request body
                while True:
                    nxt = conn.next_event()
                    if nxt is h11.NEED_DATA:
                        conn.receive_data(await reader.read(65536))
                        continue
                    if isinstance(nxt, h11.EndOfMessage) or nxt is h11.PAUSED:
                        break
                self.stats.requests += 1
                if (self.h2c_upgrade and "h2c" in headers.get("upgrade", "").lower()
                        and "http2-settings" in headers):
                    writer.write(conn.send(h11.InformationalResponse(
                        status_code=101, headers=[("connection", "Upgrade"), ("upgrade", "h2c")])))
                    await writer.drain()
                    trailing, _ = conn.trailing_data
                    await self._serve_h2(reader, writer, upgrade=(headers["http2-settings"], authority, path),
                                         initial=trailing)
                    return
                res = self.lookup(authority, path)
                resp_headers = [("content-type", res.content_type), ("content-length", str(len(res.body)))]
                resp_headers += res.headers
                writer.write(conn.send(h11.Response(status_code=res.status, headers=resp_headers)))
                if event.method != b"HEAD":
                    writer.write(conn.send(h11.Data(data=res.body)))
                writer.write(conn.send(h11.EndOfMessage()))
                await writer.drain()
                if conn.our_state is h11.MUST_CLOSE or conn.their_state is h11.MUST_CLOSE:
                    return
                conn.start_next_cycle()

    async def _serve_h2(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, *,
                        preface: bytes = b"", upgrade: tuple[str, str, str] | None = None,
                        initial: bytes = b"") -> None:
        conn = h2.connection.H2Connection(
            config=h2.config.H2Configuration(client_side=False, header_encoding="utf-8"))
        pending: dict[int, memoryview] = {}

        def respond(stream_id: int, authority: str, path: str, method: str = "GET") -> None:
            self.stats.requests += 1
            res = self.lookup(authority, path)
            hdrs = [(":status", str(res.status)), ("content-type", res.content_type),
                    ("content-length", str(len(res.body)))] + [(k.lower(), v) for k, v in res.headers]
            body = b"" if method == "HEAD" else res.body
            conn.send_headers(stream_id, hdrs, end_stream=not body)
            if body:
                pending[stream_id] = memoryview(body)

        def pump() -> None:
            for stream_id in list(pending):
                view = pending[stream_id]
                try:
                    while view:
                        window = min(conn.local_flow_control_window(stream_id), conn.max_outbound_frame_size)
                        if window <= 0:
                            break
                        chunk, view = view[:window], view[window:]
                        conn.send_data(stream_id, bytes(chunk), end_stream=not view)
                except (h2.exceptions.StreamClosedError, h2.exceptions.ProtocolError):
                    pending.pop(stream_id, None)
                    continue
                if view:
                    pending[stream_id] = view
                else:
                    pending.pop(stream_id, None)

        if upgrade is not None:
            settings, authority, path = upgrade
            conn.initiate_upgrade_connection(settings)
            respond(1, authority, path)
        else:
            conn.initiate_connection()
        pump()
        writer.write(conn.data_to_send())
        await writer.drain()
        buffered = preface + initial
        while True:
            data = buffered or await reader.read(65536)
            buffered = b""
            if not data:
                return
            try:
                events = conn.receive_data(data)
            except h2.exceptions.ProtocolError:
                writer.write(conn.data_to_send())
                await writer.drain()
                return
            for event in events:
                if isinstance(event, h2.events.RequestReceived):
                    hdrs = dict(event.headers)
                    respond(event.stream_id, hdrs.get(":authority", hdrs.get("host", "")),
                            hdrs.get(":path", "/"), hdrs.get(":method", "GET"))
                elif isinstance(event, h2.events.DataReceived):
                    conn.acknowledge_received_data(event.flow_controlled_length, event.stream_id)
                elif isinstance(event, h2.events.StreamReset):
                    pending.pop(event.stream_id, None)
                elif isinstance(event, h2.events.ConnectionTerminated):
                    writer.write(conn.data_to_send())
                    await writer.drain()
                    return
            pump()
            out = conn.data_to_send()
            if out:
                writer.write(out)
                await writer.drain()


class FixtureLoop:
    """An asyncio loop on a daemon thread hosting fixture servers.

    Client code under test keeps its own loop on the calling thread, so the
    two sides never share scheduling.
    """

    def __init__(self) -> None:
        self.loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self.loop.run_forever, name="h2scope-fixtures", daemon=True)
        self._thread.start()
        self._servers: list[FixtureServer] = []
        self._closers: list[Callable[[], Awaitable[None]]] = []

    def run(self, coro: Awaitable[T], timeout: float | None = 30) -> T:
        return asyncio.run_coroutine_threadsafe(coro, self.loop).result(timeout)

    def serve(self, server: FixtureServer, port: int = 0) -> FixtureServer:
        self.run(server.start(port=port))
        self._closers.append(server.stop)
        return server

    def add_closer(self, closer: Callable[[], Awaitable[None]]) -> None:
        self._closers.append(closer)

    def close(self) -> None:
        for closer in reversed(self._closers):
            try:
                self.run(closer(), timeout=5)
            except Exception:
                pass
        self._closers.clear()
        try:
            self.run(_cancel_all(), timeout=5)
        except Exception:
            pass
        self.loop.call_soon_threadsafe(self.loop.stop)
        self._thread.join(timeout=5)
        if not self._thread.is_alive():
            self.loop.close()

    def __enter__(self) -> "FixtureLoop":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


async def _cancel_all() -> None:
    current = asyncio.current_task()
    tasks = [t for t in asyncio.all_tasks() if t is not current]
    for task in tasks:
        task.cancel()
    await asyncio.gather(*tasks, return_exceptions=True)
