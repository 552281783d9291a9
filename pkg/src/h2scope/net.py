"""Connection setup shared by the prober, verifier and page fetcher.

``connect_to`` maps a hostname to the (address, port) actually dialled, the
same idea as curl's ``--connect-to``. Fixtures use it to stand many virtual
hosts up on loopback while keeping SNI and Host headers intact.
"""

from __future__ import annotations

import asyncio
import socket
import ssl
from dataclasses import dataclass
from typing import Mapping, Sequence

from .domains import is_ip

ConnectTo = Mapping[str, tuple[str, int]]


class NoTlsEndpoint(OSError):
    """TCP connect refused, unreachable, or name resolution failed."""


class HandshakeFailure(Exception):
    """TLS alert or protocol error during the handshake."""


class ConnectTimeout(TimeoutError):
    pass


def resolve_target(host: str, port: int, connect_to: ConnectTo | None) -> tuple[str, int]:
    if connect_to and host in connect_to:
        return connect_to[host]
    return host, port


def client_tls_context(alpn: Sequence[str] | None) -> ssl.SSLContext:
    # Certificates are never judged: invalid ones still yield announcements.
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.check_hostname = False
    ctx.verify_mode = ssl.CERT_NONE
    if alpn:
        ctx.set_alpn_protocols(list(alpn))
    return ctx


@dataclass
class Transport:
    reader: asyncio.StreamReader
    writer: asyncio.StreamWriter
    alpn: str | None
    tls_version: str | None
    peer_cert_der: bytes | None

    def close(self) -> None:
        try:
            self.writer.close()
        except Exception:  # pragma: no cover - already torn down
            pass


async def open_transport(
    host: str,
    port: int,
    *,
    tls: bool,
    alpn: Sequence[str] | None = None,
    connect_to: ConnectTo | None = None,
    connect_timeout: float = 10.0,
    handshake_timeout: float = 10.0,
) -> Transport:
    """Open TCP (and optionally TLS) to ``host:port``.

    Raises NoTlsEndpoint, HandshakeFailure or ConnectTimeout.
    """
    addr, dial_port = resolve_target(host, port, connect_to)
    loop = asyncio.get_running_loop()
    try:
        sock = await asyncio.wait_for(_connect_socket(loop, addr, dial_port), connect_timeout)
    except asyncio.TimeoutError as exc:
        raise ConnectTimeout(f"connect to {addr}:{dial_port} timed out") from exc
    except (OSError, socket.gaierror) as exc:
        raise NoTlsEndpoint(f"{addr}:{dial_port}: {exc}") from exc

    if not tls:
        reader, writer = await asyncio.open_connection(sock=sock)
        return Transport(reader, writer, None, None, None)

    ctx = client_tls_context(alpn)
    server_hostname = None if is_ip(host) else host
    try:
        reader, writer = await asyncio.wait_for(
            asyncio.open_connection(sock=sock, ssl=ctx, server_hostname=server_hostname,
                                    ssl_handshake_timeout=handshake_timeout),
            handshake_timeout + 1.0,
        )
    except asyncio.TimeoutError as exc:
        sock.close()
        raise ConnectTimeout(f"TLS handshake with {host} timed out") from exc
    except (ssl.SSLError, ConnectionError, EOFError) as exc:
        sock.close()
        raise HandshakeFailure(f"{host}: {exc}") from exc
    sslobj: ssl.SSLObject = writer.get_extra_info("ssl_object")
    return Transport(
        reader,
        writer,
        sslobj.selected_alpn_protocol(),
        sslobj.version(),
        sslobj.getpeercert(binary_form=True),
    )


async def _connect_socket(loop: asyncio.AbstractEventLoop, addr: str, port: int) -> socket.socket:
    infos = await loop.getaddrinfo(addr, port, type=socket.SOCK_STREAM)
    last: OSError | None = None
    for family, type_, proto, _, sockaddr in infos:
        sock = socket.socket(family, type_, proto)
        sock.setblocking(False)
        try:
            await loop.sock_connect(sock, sockaddr)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError as exc:
            sock.close()
            last = exc
    raise last or OSError(f"no addresses for {addr}")
