"""Phase II: does a host that announces h2 actually serve its root object over it?"""

from __future__ import annotations

import asyncio
import enum
import logging
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Iterable, Mapping
from urllib.parse import urljoin, urlsplit

from . import net
from ._util import SCHEMA_VERSION, NdjsonSink, parse_iso, utc_now
from .fetcher.client import H1Connection, H2Connection, ProtocolError, Response

log = logging.getLogger(__name__)

REDIRECT_CODES = frozenset({301, 302, 303, 307, 308})
DEFAULT_MAX_REDIRECTS = 10
MAX_PARALLEL = 10


class Verdict(str, enum.Enum):
    SERVES_H2 = "SERVES_H2"
    REDIRECT_TO_H1 = "REDIRECT_TO_H1"
    H1_ONLY_ROOT = "H1_ONLY_ROOT"
    PROTOCOL_ERROR = "PROTOCOL_ERROR"
    NETWORK_ERROR = "NETWORK_ERROR"


@dataclass
class Hop:
    url: str
    status: int
    protocol: str


@dataclass
class RedirectChain:
    hops: list[Hop] = field(default_factory=list)

    @property
    def terminal_status(self) -> int:
        return self.hops[-1].status if self.hops else 0


@dataclass
class VerdictRecord:
    host: str
    timestamp: datetime
    classification: Verdict
    chain: RedirectChain = field(default_factory=RedirectChain)
    root_size: int | None = None
    terminal_domain: str | None = None
    reason: str | None = None
    schema_version: int = SCHEMA_VERSION

    @property
    def serves_h2(self) -> bool:
        return self.classification is Verdict.SERVES_H2

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "host": self.host,
            "timestamp": self.timestamp,
            "serves_h2": self.serves_h2,
            "classification": self.classification,
            "chain": {"hops": [vars(h) for h in self.chain.hops],
                      "terminal_status": self.chain.terminal_status},
            "root_size": self.root_size,
            "terminal_domain": self.terminal_domain,
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "VerdictRecord":
        hops = [Hop(h["url"], int(h["status"]), h["protocol"]) for h in doc.get("chain", {}).get("hops", [])]
        return cls(
            host=doc["host"],
            timestamp=parse_iso(doc["timestamp"]),
            classification=Verdict(doc["classification"]),
            chain=RedirectChain(hops),
            root_size=doc.get("root_size"),
            terminal_domain=doc.get("terminal_domain"),
            reason=doc.get("reason"),
            schema_version=int(doc.get("schema_version", SCHEMA_VERSION)),
        )


@dataclass
class VerifyConfig:
    port: int = 443
    connect_timeout: float = 10.0
    request_timeout: float = 20.0
    user_agent: str = "h2scope-verifier"
    connect_to: Mapping[str, tuple[str, int]] | None = None


async def _get(url: str, cfg: VerifyConfig) -> tuple[str, Response | None, str | None]:
    """One hop: returns (protocol, response, negotiated-alpn)."""
    parts = urlsplit(url)
    host = parts.hostname or ""
    tls = parts.scheme == "https"
    port = parts.port or (443 if tls else 80)
    authority = parts.netloc.rsplit("@", 1)[-1]
    path = (parts.path or "/") + (f"?{parts.query}" if parts.query else "")
    transport = await net.open_transport(
        host, port, tls=tls, alpn=["h2", "http/1.1"] if tls else None, connect_to=cfg.connect_to,
        connect_timeout=cfg.connect_timeout, handshake_timeout=cfg.connect_timeout)
    headers = [("user-agent", cfg.user_agent), ("accept", "*/*")]
    conn: H1Connection | H2Connection
    try:
        if tls and transport.alpn == "h2":
            conn = H2Connection(transport, authority, "https")
            await conn.start()
        else:
            conn = H1Connection(transport, authority)
        resp = await asyncio.wait_for(conn.request("GET", path, headers), cfg.request_timeout)
        return conn.protocol, resp, transport.alpn
    finally:
        transport.close()


async def verify_h2_async(host: str, max_redirects: int = DEFAULT_MAX_REDIRECTS,
                          cfg: VerifyConfig | None = None) -> VerdictRecord:
    cfg = cfg or VerifyConfig()
    record = VerdictRecord(host=host, timestamp=utc_now(), classification=Verdict.NETWORK_ERROR)
    url = f"https://{host}/" if cfg.port == 443 else f"https://{host}:{cfg.port}/"
    redirects = 0
    while True:
        record.terminal_domain = urlsplit(url).hostname
        try:
            protocol, resp, _ = await _get(url, cfg)
        except net.HandshakeFailure as exc:
            record.classification, record.reason = Verdict.PROTOCOL_ERROR, f"HandshakeFailure: {exc}"
            return record
        except (net.NoTlsEndpoint, net.ConnectTimeout, asyncio.TimeoutError, OSError) as exc:
            record.classification, record.reason = Verdict.NETWORK_ERROR, f"{type(exc).__name__}: {exc}"
            return record
        except ProtocolError as exc:
            record.classification, record.reason = Verdict.PROTOCOL_ERROR, str(exc)
            return record
        assert resp is not None
        record.chain.hops.append(Hop(url, resp.status, protocol))
        if protocol == "H1":
            if len(record.chain.hops) == 1:
                record.classification = Verdict.H1_ONLY_ROOT
                record.reason = "root did not negotiate h2"
            else:
                record.classification = Verdict.REDIRECT_TO_H1
            return record
        location = resp.header("location")
        if resp.status in REDIRECT_CODES and location:
            if redirects >= max_redirects:
                record.classification, record.reason = Verdict.PROTOCOL_ERROR, "RedirectLoop"
                return record
            redirects += 1
            url = urljoin(url, location)
            continue
        if resp.status == 200:
            record.classification = Verdict.SERVES_H2
            record.root_size = len(resp.body)
        else:
            record.classification, record.reason = Verdict.PROTOCOL_ERROR, f"HttpStatus {resp.status}"
        return record


def verify_h2(host: str, max_redirects: int = DEFAULT_MAX_REDIRECTS, cfg: VerifyConfig | None = None) -> VerdictRecord:
    return asyncio.run(verify_h2_async(host, max_redirects, cfg))


async def verify_many(hosts: Iterable[str], *, max_redirects: int = DEFAULT_MAX_REDIRECTS,
                      parallel: int = MAX_PARALLEL, cfg: VerifyConfig | None = None,
                      sink: NdjsonSink | None = None) -> list[VerdictRecord]:
    """Verify hosts with at most ``parallel`` (capped at 10) in flight; results in input order."""
    parallel = max(1, min(parallel, MAX_PARALLEL))
    sem = asyncio.Semaphore(parallel)

    async def one(host: str) -> VerdictRecord:
        async with sem:
            rec = await verify_h2_async(host, max_redirects, cfg)
        if sink is not None:
            sink.write(rec.to_dict())
        return rec

    return list(await asyncio.gather(*(one(h) for h in hosts)))
