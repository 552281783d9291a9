"""Phase III engine: load a whole page over exactly one protocol.

H2 loads open one connection per origin and multiplex every request on it.
H1 loads keep up to ``h1_max_conns_per_domain`` persistent connections per
origin and send one request at a time on each. Objects that cannot be
fetched over the selected protocol are recorded as errors; there is no
fallback.

PLT runs from dispatch of the root request until the last discovered object
completes or fails.
"""

from __future__ import annotations

import asyncio
import enum
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Mapping
from urllib.parse import urljoin, urlsplit

from .. import net
from .._util import SCHEMA_VERSION, parse_iso, utc_now
from ..domains import registrable_domain
from .client import H1Connection, H2Connection, ProtocolError, Response, new_connection_id
from .extract import extract_objects, fetchable

log = logging.getLogger(__name__)

ROOT_REDIRECTS = 10
_REDIRECTS = {301, 302, 303, 307, 308}


class Protocol(str, enum.Enum):
    H1 = "H1"
    H2 = "H2"

    @classmethod
    def parse(cls, value: "str | Protocol") -> "Protocol":
        if isinstance(value, Protocol):
            return value
        return cls(value.upper().replace("HTTP/1.1", "H1").replace("HTTP/2", "H2"))


class UserAgent(str, enum.Enum):
    DESKTOP = "DESKTOP"
    MOBILE = "MOBILE"


UA_STRINGS = {
    UserAgent.DESKTOP: "Mozilla/5.0 (X11; Linux x86_64) AppleWebKit/537.36 (KHTML, like Gecko) "
                       "Chrome/124.0 Safari/537.36 h2scope",
    UserAgent.MOBILE: "Mozilla/5.0 (Linux; Android 14; Pixel 8) AppleWebKit/537.36 (KHTML, like Gecko) "
                      "Chrome/124.0 Mobile Safari/537.36 h2scope",
}


class RootFetchFailed(Exception):
    pass


class ProtocolUnavailable(ProtocolError):
    """The origin does not speak the protocol selected for this load."""


@dataclass
class FetchConfig:
    h1_max_conns_per_domain: int = 6
    per_object_timeout: float = 30.0
    max_objects: int = 500
    user_agent: UserAgent = UserAgent.DESKTOP
    connect_timeout: float = 10.0
    connect_to: Mapping[str, tuple[str, int]] | None = None

    def __post_init__(self) -> None:
        if self.h1_max_conns_per_domain < 1:
            raise ValueError("h1_max_conns_per_domain must be >= 1")
        self.user_agent = UserAgent(self.user_agent)


@dataclass
class ObjectRecord:
    url: str
    domain: str
    status: int
    size: int
    content_type: str
    protocol: Protocol
    connection_id: str
    t_start: float
    t_end: float

    @property
    def registrable_domain(self) -> str:
        return registrable_domain(self.domain)


@dataclass
class ConnectionEntry:
    connection_id: str
    domain: str
    protocol: Protocol
    object_count: int = 0


@dataclass
class FetchError:
    url: str
    kind: str
    detail: str = ""
    t_end: float = 0.0


@dataclass
class PageSnapshot:
    root_url: str
    protocol: Protocol
    started_at: datetime
    root: ObjectRecord | None = None
    objects: list[ObjectRecord] = field(default_factory=list)
    inline_css_js_bytes: int = 0
    html_bytes: int = 0
    connections: list[ConnectionEntry] = field(default_factory=list)
    plt: float = 0.0
    fetch_errors: list[FetchError] = field(default_factory=list)
    user_agent: UserAgent = UserAgent.DESKTOP
    schema_version: int = SCHEMA_VERSION

    @property
    def ok(self) -> bool:
        return self.root is not None

    @property
    def all_objects(self) -> list[ObjectRecord]:
        return ([self.root] if self.root else []) + self.objects

    @property
    def total_bytes(self) -> int:
        return self.html_bytes + sum(o.size for o in self.objects)

    @property
    def domains(self) -> set[str]:
        return {o.domain for o in self.all_objects}

    def to_dict(self) -> dict[str, Any]:
        def obj(o: ObjectRecord) -> dict[str, Any]:
            return {"url": o.url, "domain": o.domain, "status": o.status, "size": o.size,
                    "content_type": o.content_type, "protocol": o.protocol.value,
                    "connection_id": o.connection_id, "t_start_us": _us(o.t_start), "t_end_us": _us(o.t_end)}

        return {
            "schema_version": self.schema_version,
            "root_url": self.root_url,
            "protocol": self.protocol.value,
            "started_at": self.started_at,
            "user_agent": self.user_agent.value,
            "root": obj(self.root) if self.root else None,
            "objects": [obj(o) for o in self.objects],
            "inline_css_js_bytes": self.inline_css_js_bytes,
            "html_bytes": self.html_bytes,
            "total_bytes": self.total_bytes,
            "connections": [{"connection_id": c.connection_id, "domain": c.domain,
                             "protocol": c.protocol.value, "object_count": c.object_count}
                            for c in self.connections],
            "plt_us": _us(self.plt),
            "fetch_errors": [{"url": e.url, "kind": e.kind, "detail": e.detail, "t_end_us": _us(e.t_end)}
                             for e in self.fetch_errors],
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PageSnapshot":
        def obj(d: Mapping[str, Any]) -> ObjectRecord:
            return ObjectRecord(d["url"], d["domain"], int(d["status"]), int(d["size"]), d["content_type"],
                                Protocol(d["protocol"]), d["connection_id"],
                                d["t_start_us"] / 1e6, d["t_end_us"] / 1e6)

        return cls(
            root_url=doc["root_url"],
            protocol=Protocol(doc["protocol"]),
            started_at=parse_iso(doc["started_at"]),
            root=obj(doc["root"]) if doc.get("root") else None,
            objects=[obj(d) for d in doc.get("objects", [])],
            inline_css_js_bytes=int(doc.get("inline_css_js_bytes", 0)),
            html_bytes=int(doc.get("html_bytes", 0)),
            connections=[ConnectionEntry(c["connection_id"], c["domain"], Protocol(c["protocol"]),
                                         int(c["object_count"])) for c in doc.get("connections", [])],
            plt=doc.get("plt_us", 0) / 1e6,
            fetch_errors=[FetchError(e["url"], e["kind"], e.get("detail", ""), e.get("t_end_us", 0) / 1e6)
                          for e in doc.get("fetch_errors", [])],
            user_agent=UserAgent(doc.get("user_agent", "DESKTOP")),
            schema_version=int(doc.get("schema_version", SCHEMA_VERSION)),
        )


def _us(seconds: float) -> int:
    return int(round(seconds * 1_000_000))


Origin = tuple[str, str, int]


def _origin(url: str) -> Origin:
    parts = urlsplit(url)
    tls = parts.scheme == "https"
    return parts.scheme, (parts.hostname or "").lower(), parts.port or (443 if tls else 80)


class ConnectionPool:
    """Connections for a single page load; never shared between loads."""

    def __init__(self, protocol: Protocol, cfg: FetchConfig):
        self.protocol = protocol
        self.cfg = cfg
        self.ledger: dict[str, ConnectionEntry] = {}
        self._lock = asyncio.Lock()
        self._h2: dict[Origin, asyncio.Task] = {}
        self._h1_idle: dict[Origin, list[H1Connection]] = {}
        self._h1_slots: dict[Origin, asyncio.Semaphore] = {}
        self._open: list[H1Connection | H2Connection] = []

    async def _transport(self, origin: Origin, alpn: list[str] | None) -> net.Transport:
        scheme, host, port = origin
        return await net.open_transport(host, port, tls=scheme == "https", alpn=alpn,
                                        connect_to=self.cfg.connect_to,
                                        connect_timeout=self.cfg.connect_timeout,
                                        handshake_timeout=self.cfg.connect_timeout)

    @staticmethod
    def _authority(origin: Origin) -> str:
        scheme, host, port = origin
        default = 443 if scheme == "https" else 80
        return host if port == default else f"{host}:{port}"

    async def _record(self, conn: H1Connection | H2Connection, host: str) -> None:
        async with self._lock:
            self.ledger[conn.connection_id] = ConnectionEntry(conn.connection_id, host, self.protocol)
            self._open.append(conn)

    async def _open_h2(self, origin: Origin) -> H2Connection:
        scheme = origin[0]
        transport = await self._transport(origin, ["h2"] if scheme == "https" else None)
        if scheme == "https" and transport.alpn != "h2":
            transport.close()
            raise ProtocolUnavailable(f"{origin[1]} did not negotiate h2 (got {transport.alpn!r})")
        conn = H2Connection(transport, self._authority(origin), scheme, new_connection_id("h2"))
        try:
            await conn.start()
        except (ConnectionError, OSError) as exc:
            transport.close()
            raise ProtocolError(str(exc)) from exc
        await self._record(conn, origin[1])
        return conn

    async def _h2_request(self, origin: Origin, path: str, headers: list[tuple[str, str]]) -> Response:
        task = self._h2.get(origin)
        if task is None:
            task = asyncio.get_running_loop().create_task(self._open_h2(origin))
            self._h2[origin] = task
        conn = await asyncio.shield(task)
        return await conn.request("GET", path, headers)

    async def _h1_request(self, origin: Origin, path: str, headers: list[tuple[str, str]]) -> Response:
        slots = self._h1_slots.setdefault(origin, asyncio.Semaphore(self.cfg.h1_max_conns_per_domain))
        idle = self._h1_idle.setdefault(origin, [])
        async with slots:
            conn = idle.pop() if idle else None
            if conn is None:
                transport = await self._transport(origin, ["http/1.1"] if origin[0] == "https" else None)
                if transport.alpn not in (None, "http/1.1"):
                    transport.close()
                    raise ProtocolUnavailable(f"{origin[1]} selected {transport.alpn!r}")
                conn = H1Connection(transport, self._authority(origin), new_connection_id("h1"))
                await self._record(conn, origin[1])
            try:
                resp = await conn.request("GET", path, headers)
            finally:
                if conn.reusable:
                    idle.append(conn)
                else:
                    conn.close()
            return resp

    async def get(self, url: str) -> Response:
        origin = _origin(url)
        parts = urlsplit(url)
        path = (parts.path or "/") + (f"?{parts.query}" if parts.query else "")
        headers = [("user-agent", UA_STRINGS[self.cfg.user_agent]), ("accept", "*/*"),
                   ("accept-encoding", "identity")]
        if self.protocol is Protocol.H2:
            resp = await self._h2_request(origin, path, headers)
        else:
            resp = await self._h1_request(origin, path, headers)
        entry = self.ledger.get(resp.connection_id)
        if entry is not None:
            entry.object_count += 1
        return resp

    def close(self) -> None:
        for conn in self._open:
            conn.close()
        for task in self._h2.values():
            if not task.done():
                task.cancel()


def _error_kind(exc: BaseException) -> str:
    if isinstance(exc, ProtocolUnavailable):
        return "ProtocolUnavailable"
    if isinstance(exc, ProtocolError):
        return "ProtocolError"
    if isinstance(exc, (asyncio.TimeoutError, net.ConnectTimeout)):
        return "Timeout"
    if isinstance(exc, net.HandshakeFailure):
        return "HandshakeFailure"
    return "NetworkError"


async def fetch_page_async(root_url: str, protocol: Protocol | str, cfg: FetchConfig | None = None) -> PageSnapshot:
    cfg = cfg or FetchConfig()
    protocol = Protocol.parse(protocol)
    if urlsplit(root_url).scheme not in ("http", "https"):
        raise ValueError(f"unsupported URL scheme: {root_url}")
    loop = asyncio.get_running_loop()
    snap = PageSnapshot(root_url=root_url, protocol=protocol, started_at=utc_now(), user_agent=cfg.user_agent)
    pool = ConnectionPool(protocol, cfg)
    t0 = loop.time()

    def now() -> float:
        return loop.time() - t0

    async def transfer(url: str) -> tuple[ObjectRecord, Response]:
        t_start = now()
        resp = await asyncio.wait_for(pool.get(url), cfg.per_object_timeout)
        t_end = max(now(), t_start + 1e-6)
        rec = ObjectRecord(url, _origin(url)[1], resp.status, len(resp.body),
                           resp.header("content-type") or "", protocol, resp.connection_id, t_start, t_end)
        if resp.pushes_rejected:
            snap.fetch_errors.append(FetchError(url, "PushRejected", f"{resp.pushes_rejected} pushed streams"))
        return rec, resp

    try:
        url = root_url
        for _ in range(ROOT_REDIRECTS + 1):
            try:
                root, resp = await transfer(url)
            except Exception as exc:
                snap.fetch_errors.append(FetchError(url, "RootFetchFailed", f"{_error_kind(exc)}: {exc}", now()))
                snap.plt = now()
                return snap
            location = resp.header("location")
            if root.status in _REDIRECTS and location:
                snap.objects.append(root)
                url = urljoin(url, location)
                continue
            break
        if root.status != 200:
            snap.fetch_errors.append(FetchError(url, "RootFetchFailed", f"HTTP {root.status}", root.t_end))
            snap.objects.clear()
            snap.plt = now()
            return snap
        snap.root = root
        snap.html_bytes = root.size
        refs, snap.inline_css_js_bytes = extract_objects(resp.body, root.content_type or "text/html", url)

        seen = {root_url, url} | {o.url for o in snap.objects}
        pending: set[asyncio.Task] = set()

        def schedule(urls: list[str], depth: int) -> None:
            for u in urls:
                if u in seen:
                    continue
                if len(seen) - 1 >= cfg.max_objects:
                    snap.fetch_errors.append(FetchError(u, "ObjectCapReached", f"max_objects={cfg.max_objects}", now()))
                    seen.add(u)
                    continue
                seen.add(u)
                pending.add(loop.create_task(one(u, depth)))

        async def one(u: str, depth: int) -> None:
            try:
                rec, r = await transfer(u)
            except Exception as exc:
                snap.fetch_errors.append(FetchError(u, _error_kind(exc), str(exc)[:200], now()))
                return
            snap.objects.append(rec)
            # one level of CSS recursion: root -> stylesheet -> its images/imports
            if depth == 1 and rec.content_type.split(";")[0].strip().lower() == "text/css" and r.status == 200:
                css_refs, _ = extract_objects(r.body, "text/css", u)
                schedule(fetchable(css_refs), depth + 1)

        schedule(fetchable(refs), 1)
        while pending:
            done, _ = await asyncio.wait(pending)
            pending -= done
        ends = [o.t_end for o in snap.all_objects] + [e.t_end for e in snap.fetch_errors]
        snap.plt = max(ends) if ends else now()
        return snap
    finally:
        snap.connections = list(pool.ledger.values())
        pool.close()


def fetch_page(root_url: str, protocol: Protocol | str, cfg: FetchConfig | None = None) -> PageSnapshot:
    return asyncio.run(fetch_page_async(root_url, protocol, cfg))


async def measure_plt_async(root_url: str, protocol: Protocol | str, cfg: FetchConfig | None = None,
                            repetitions: int = 3) -> list[PageSnapshot]:
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    # strictly sequential: loads must not interfere with each other
    return [await fetch_page_async(root_url, protocol, cfg) for _ in range(repetitions)]


def measure_plt(root_url: str, protocol: Protocol | str, cfg: FetchConfig | None = None,
                repetitions: int = 3) -> list[PageSnapshot]:
    return asyncio.run(measure_plt_async(root_url, protocol, cfg, repetitions))


def require_root(snap: PageSnapshot) -> PageSnapshot:
    """Raise RootFetchFailed for a snapshot whose root could not be fetched."""
    if snap.root is None:
        detail = snap.fetch_errors[0].detail if snap.fetch_errors else "unknown"
        raise RootFetchFailed(f"{snap.root_url}: {detail}")
    return snap
