"""Phase I: which application protocols a host announces.

ALPN only reveals the server's single selection, so the full announced list
is recovered by elimination: offer everything, record the selection, drop it
from the offer, repeat until the server stops acknowledging. Servers choose
in their own preference order, so the recovered list keeps that order.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import ssl
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Iterable, Mapping, Sequence

import h11
import h2.connection
from cryptography import x509
from cryptography.x509.oid import NameOID

from . import net
from ._util import SCHEMA_VERSION, parse_iso, utc_now
from .domains import is_valid_hostname
from .fetcher.client import H1Connection, H2Connection, ProtocolError

log = logging.getLogger(__name__)

DEFAULT_OFFER = ("h2", "h2-17", "h2-16", "h2-15", "h2-14", "spdy/3.1", "spdy/3", "spdy/2", "http/1.1")
QUIC_FAMILY = ("quic", "h3", "hq")


class Mechanism(str, enum.Enum):
    ALPN = "ALPN"
    NPN = "NPN"
    NONE = "NONE"


class Upgrade(str, enum.Enum):
    SUPPORTED = "SUPPORTED"
    UNSUPPORTED = "UNSUPPORTED"
    ERROR = "ERROR"


class ProbeError(str, enum.Enum):
    NO_TLS_ENDPOINT = "NoTlsEndpoint"
    HANDSHAKE_FAILURE = "HandshakeFailure"
    TIMEOUT = "Timeout"


def validate_protocol_id(token: str) -> str:
    if not token or len(token.encode()) > 255:
        raise ValueError(f"invalid protocol id {token!r}: must be 1..255 bytes")
    return token


@dataclass
class ProbeConfig:
    offered_protocols: Sequence[str] = DEFAULT_OFFER
    connect_timeout: float = 10.0
    handshake_timeout: float = 10.0
    retries: int = 1
    cleartext_port: int = 80
    check_cleartext: bool = True
    check_https_headers: bool = True
    connect_to: Mapping[str, tuple[str, int]] | None = None

    def __post_init__(self) -> None:
        if not self.offered_protocols:
            raise ValueError("offered_protocols must not be empty")
        for token in self.offered_protocols:
            validate_protocol_id(token)
        if self.connect_timeout <= 0 or self.handshake_timeout <= 0:
            raise ValueError("timeouts must be positive")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


@dataclass
class ProbeRecord:
    host: str
    port: int
    timestamp: datetime
    mechanism: Mechanism
    announced: list[str] = field(default_factory=list)
    negotiated: str | None = None
    cleartext_upgrade: Upgrade = Upgrade.ERROR
    quic_advertised: bool = False
    error: ProbeError | None = None
    multi_handshake: bool = False
    handshakes: int = 0
    tls_version: str | None = None
    cert_organization: str | None = None
    note: str | None = None
    schema_version: int = SCHEMA_VERSION

    @property
    def announces_h2(self) -> bool:
        return any(is_h2_token(t) for t in self.announced)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ProbeRecord":
        return cls(
            host=doc["host"],
            port=int(doc.get("port", 443)),
            timestamp=parse_iso(doc["timestamp"]),
            mechanism=Mechanism(doc["mechanism"]),
            announced=list(doc.get("announced", [])),
            negotiated=doc.get("negotiated"),
            cleartext_upgrade=Upgrade(doc.get("cleartext_upgrade", "ERROR")),
            quic_advertised=bool(doc.get("quic_advertised", False)),
            error=ProbeError(doc["error"]) if doc.get("error") else None,
            multi_handshake=bool(doc.get("multi_handshake", False)),
            handshakes=int(doc.get("handshakes", 0)),
            tls_version=doc.get("tls_version"),
            cert_organization=doc.get("cert_organization"),
            note=doc.get("note"),
            schema_version=int(doc.get("schema_version", SCHEMA_VERSION)),
        )


def is_h2_token(token: str) -> bool:
    return token == "h2" or token.startswith("h2-")


def _cert_org(der: bytes | None) -> str | None:
    if not der:
        return None
    try:
        cert = x509.load_der_x509_certificate(der)
        attrs = cert.subject.get_attributes_for_oid(NameOID.ORGANIZATION_NAME)
    except Exception:
        return None
    return str(attrs[0].value) if attrs else None


def _classify(exc: BaseException) -> ProbeError:
    if isinstance(exc, (net.ConnectTimeout, asyncio.TimeoutError)):
        return ProbeError.TIMEOUT
    if isinstance(exc, net.HandshakeFailure):
        return ProbeError.HANDSHAKE_FAILURE
    return ProbeError.NO_TLS_ENDPOINT


async def _handshake(host: str, port: int, offer: Sequence[str], cfg: ProbeConfig) -> net.Transport:
    attempt = 0
    while True:
        try:
            return await net.open_transport(
                host, port, tls=True, alpn=offer, connect_to=cfg.connect_to,
                connect_timeout=cfg.connect_timeout, handshake_timeout=cfg.handshake_timeout)
        except (net.NoTlsEndpoint, net.HandshakeFailure, net.ConnectTimeout):
            attempt += 1
            if attempt > cfg.retries:
                raise


async def discover_alpn(host: str, port: int, cfg: ProbeConfig) -> dict[str, Any]:
    """Run the elimination handshakes; raises on failure of the first one."""
    remaining = list(cfg.offered_protocols)
    first = await _handshake(host, port, remaining, cfg)
    first.close()
    out: dict[str, Any] = {
        "negotiated": first.alpn,
        "announced": [],
        "handshakes": 1,
        "tls_version": first.tls_version,
        "cert_organization": _cert_org(first.peer_cert_der),
        "note": None,
    }
    selected = first.alpn
    while selected is not None:
        if selected not in remaining:
            out["note"] = f"server selected unoffered token {selected!r}"
            break
        out["announced"].append(selected)
        remaining.remove(selected)
        if not remaining:
            break
        try:
            transport = await _handshake(host, port, remaining, cfg)
        except (net.NoTlsEndpoint, net.HandshakeFailure, net.ConnectTimeout) as exc:
            out["note"] = f"announced list may be incomplete: {_classify(exc).value}"
            break
        out["handshakes"] += 1
        transport.close()
        selected = transport.alpn
    return out


async def probe_host_async(host: str, port: int = 443, cfg: ProbeConfig | None = None) -> ProbeRecord:
    cfg = cfg or ProbeConfig()
    if not is_valid_hostname(host):
        raise ValueError(f"not a valid DNS name: {host!r}")
    if not 1 <= port <= 65535:
        raise ValueError(f"port out of range: {port}")
    record = ProbeRecord(host=host, port=port, timestamp=utc_now(), mechanism=Mechanism.NONE)
    try:
        found = await discover_alpn(host, port, cfg)
    except (net.NoTlsEndpoint, net.HandshakeFailure, net.ConnectTimeout, OSError) as exc:
        record.error = _classify(exc)
        record.note = str(exc)[:200]
    else:
        record.announced = found["announced"]
        record.negotiated = found["negotiated"]
        record.handshakes = found["handshakes"]
        record.multi_handshake = found["handshakes"] > 1
        record.tls_version = found["tls_version"]
        record.cert_organization = found["cert_organization"]
        record.note = found["note"]
        if record.announced:
            record.mechanism = Mechanism.ALPN
        else:
            record.negotiated = None
            record.note = "no ALPN selection" + ("" if ssl.HAS_NPN else "; NPN unavailable in this TLS stack")
    if cfg.check_cleartext:
        status, headers = await _upgrade_exchange(host, cfg.cleartext_port, cfg)
        record.cleartext_upgrade = status
        record.quic_advertised = check_quic_advertisement(headers)
    if cfg.check_https_headers and record.error is None and not record.quic_advertised:
        record.quic_advertised = check_quic_advertisement(await _https_root_headers(host, port, cfg))
    return record


async def _https_root_headers(host: str, port: int, cfg: ProbeConfig) -> list[tuple[str, str]]:
    """Response headers of ``GET /`` over TLS; empty on any failure."""
    try:
        transport = await net.open_transport(
            host, port, tls=True, alpn=["h2", "http/1.1"], connect_to=cfg.connect_to,
            connect_timeout=cfg.connect_timeout, handshake_timeout=cfg.handshake_timeout)
    except (net.NoTlsEndpoint, net.HandshakeFailure, net.ConnectTimeout, OSError):
        return []
    authority = host if port == 443 else f"{host}:{port}"
    try:
        conn: H1Connection | H2Connection
        if transport.alpn == "h2":
            conn = H2Connection(transport, authority, "https")
            await conn.start()
        else:
            conn = H1Connection(transport, authority)
        resp = await asyncio.wait_for(conn.request("GET", "/", [("user-agent", "h2scope-prober")]),
                                      cfg.handshake_timeout)
        return list(resp.headers)
    except (ProtocolError, h11.ProtocolError, asyncio.TimeoutError, ConnectionError, OSError):
        return []
    finally:
        transport.close()


def probe_host(host: str, port: int = 443, cfg: ProbeConfig | None = None) -> ProbeRecord:
    return asyncio.run(probe_host_async(host, port, cfg))


async def probe_many(hosts: Iterable[str], cfg: ProbeConfig | None = None, *, port: int = 443,
                     parallel: int = 20) -> list[ProbeRecord]:
    """Probe hosts concurrently; results come back in input order."""
    cfg = cfg or ProbeConfig()
    sem = asyncio.Semaphore(parallel)

    async def one(host: str) -> ProbeRecord:
        async with sem:
            try:
                return await probe_host_async(host, port, cfg)
            except ValueError as exc:
                return ProbeRecord(host=host, port=port, timestamp=utc_now(), mechanism=Mechanism.NONE,
                                   error=ProbeError.NO_TLS_ENDPOINT, note=str(exc))

    return list(await asyncio.gather(*(one(h) for h in hosts)))


def _upgrade_request(host: str, port: int) -> h11.Request:
    settings = h2.connection.H2Connection().initiate_upgrade_connection()
    if isinstance(settings, bytes):
        settings = settings.decode()
    authority = host if port == 80 else f"{host}:{port}"
    return h11.Request(method="GET", target="/", headers=[
        ("host", authority),
        ("connection", "Upgrade, HTTP2-Settings"),
        ("upgrade", "h2c"),
        ("http2-settings", settings),
        ("user-agent", "h2scope-prober"),
    ])


async def _upgrade_exchange(host: str, port: int, cfg: ProbeConfig) -> tuple[Upgrade, list[tuple[str, str]]]:
    try:
        transport = await net.open_transport(host, port, tls=False, connect_to=cfg.connect_to,
                                             connect_timeout=cfg.connect_timeout)
    except (net.NoTlsEndpoint, net.ConnectTimeout, OSError):
        return Upgrade.ERROR, []
    conn = h11.Connection(our_role=h11.CLIENT)
    try:
        transport.writer.write(conn.send(_upgrade_request(host, port)))
        transport.writer.write(conn.send(h11.EndOfMessage()))
        await transport.writer.drain()
        while True:
            event = conn.next_event()
            if event is h11.NEED_DATA:
                data = await asyncio.wait_for(transport.reader.read(65536), cfg.handshake_timeout)
                conn.receive_data(data)
                continue
            if isinstance(event, (h11.InformationalResponse, h11.Response)):
                headers = [(k.decode().lower(), v.decode("latin-1")) for k, v in event.headers]
                if event.status_code == 101:
                    upgrade = ",".join(v for k, v in headers if k == "upgrade").lower()
                    ok = "h2c" in [t.strip() for t in upgrade.split(",")]
                    return (Upgrade.SUPPORTED if ok else Upgrade.UNSUPPORTED), headers
                if isinstance(event, h11.InformationalResponse):
                    continue
                return Upgrade.UNSUPPORTED, headers
            if isinstance(event, h11.ConnectionClosed):
                return Upgrade.ERROR, []
    except (h11.ProtocolError, asyncio.TimeoutError, ConnectionError, OSError):
        return Upgrade.ERROR, []
    finally:
        transport.close()


def check_cleartext_upgrade(host: str, port: int = 80, cfg: ProbeConfig | None = None) -> Upgrade:
    cfg = cfg or ProbeConfig()
    status, _ = asyncio.run(_upgrade_exchange(host, port, cfg))
    return status


def _header_values(headers: Any, name: str) -> list[str]:
    if hasattr(headers, "get_all"):
        return [str(v) for v in headers.get_all(name) or []]
    if hasattr(headers, "get_list"):
        return [str(v) for v in headers.get_list(name)]
    items = headers.items() if hasattr(headers, "items") else headers
    return [str(v) for k, v in items if str(k).lower() == name]


def check_quic_advertisement(response_headers: Any) -> bool:
    """True when the headers advertise a QUIC-family alternative.

    Accepts a mapping or a sequence of (name, value) pairs. ``Alternate-Protocol``
    counts on presence alone; ``Alt-Svc`` needs a quic/h3/hq protocol id.
    """
    if _header_values(response_headers, "alternate-protocol"):
        return True
    for value in _header_values(response_headers, "alt-svc"):
        for alternative in value.split(","):
            proto = alternative.split(";", 1)[0].split("=", 1)[0].strip().strip('"').lower()
            if proto and any(proto == fam or proto.startswith(fam + "-") or proto.startswith(fam + "/")
                             for fam in QUIC_FAMILY):
                return True
    return False
