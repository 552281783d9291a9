"""Canned fixture content and fleets used by tests, the acceptance suite and ``h2scope fixtures``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .netem import EmulatedLink, LinkProfile, LinkProxy
from .server import FixtureLoop, FixtureServer, Resource, redirect


def html_page(refs: Sequence[str], *, inline_style: bytes = b"", inline_script: bytes = b"",
              pad_to: int | None = None) -> bytes:
    parts = [b"<!doctype html><html><head><title>fixture</title>"]
    if inline_style:
        parts.append(b"<style>" + inline_style + b"</style>")
    for ref in refs:
        if ref.endswith(".css"):
            parts.append(b'<link rel="stylesheet" href="' + ref.encode() + b'">')
        elif ref.endswith(".js"):
            parts.append(b'<script src="' + ref.encode() + b'"></script>')
    if inline_script:
        parts.append(b"<script>" + inline_script + b"</script>")
    parts.append(b"</head><body>")
    for ref in refs:
        if not ref.endswith((".css", ".js")):
            parts.append(b'<img src="' + ref.encode() + b'">')
    parts.append(b"</body></html>")
    doc = b"".join(parts)
    if pad_to is not None and len(doc) < pad_to:
        doc = doc.replace(b"<body>", b"<body><!--" + b"x" * (pad_to - len(doc) - 7) + b"-->", 1)
    return doc


def inline_fraction_html(total_bytes: int, fraction: float) -> bytes:
    """HTML of exactly ``total_bytes`` whose style+script bodies make up ``fraction`` of it."""
    inline = round(total_bytes * fraction)
    shell = b"<html><head><style></style><script></script></head><body></body></html>"
    if len(shell) + inline > total_bytes:
        raise ValueError("total_bytes too small for the requested fraction")
    style = inline // 2
    script = inline - style
    filler = total_bytes - len(shell) - inline
    return (b"<html><head><style>" + b"a" * style + b"</style><script>" + b"b" * script
            + b"</script></head><body>" + b"p" * filler + b"</body></html>")


def sharded_site(root_host: str, shard_hosts: Sequence[str], n_objects: int, object_size: int = 3000,
                 *, scheme: str = "https") -> dict[str, dict[str, Resource]]:
    """Root page on ``root_host`` referencing ``n_objects`` images spread round-robin over ``shard_hosts``."""
    sites: dict[str, dict[str, Resource]] = {h: {} for h in [root_host, *shard_hosts]}
    refs = []
    for i in range(n_objects):
        host = shard_hosts[i % len(shard_hosts)]
        path = f"/img/{i}.png"
        body = bytes((i + j) % 251 for j in range(object_size))
        sites[host][path] = Resource(body=body, content_type="image/png")
        refs.append(f"{scheme}://{host}{path}")
    sites[root_host]["/"] = Resource(body=html_page(refs))
    return sites


@dataclass
class Fleet:
    """A set of running fixture servers plus the connect-to map that reaches them."""

    loop: FixtureLoop
    connect_to: dict[str, tuple[str, int]] = field(default_factory=dict)
    servers: list[FixtureServer] = field(default_factory=list)
    link: EmulatedLink | None = None
    proxies: list[LinkProxy] = field(default_factory=list)

    def add(self, server: FixtureServer, hosts: Sequence[str] | None = None) -> FixtureServer:
        self.loop.serve(server)
        self.servers.append(server)
        port = server.port
        if self.link is not None:
            proxy = LinkProxy(self.link, server.port)
            self.loop.run(proxy.start())
            self.loop.add_closer(proxy.stop)
            self.proxies.append(proxy)
            port = proxy.port
        for host in hosts if hosts is not None else server.sites:
            self.connect_to[host] = ("127.0.0.1", port)
        return server

    def shape(self, profile: LinkProfile, seed: int | None = None) -> None:
        if self.link is None:
            raise RuntimeError("fleet was created without an emulated link")
        link = self.link
        self.loop.run(_configure(link, profile, seed))


class FleetShaper:
    """Bench shaper that applies scenario knobs to a fleet's emulated link."""

    def __init__(self, fleet: Fleet, seed: int | None = None, base_rtt_ms: float = 0.0):
        self.fleet = fleet
        self.seed = seed
        self.base_rtt_ms = base_rtt_ms
        self.lock_key = f"fleet-{id(fleet)}"

    def setup(self, scenario) -> None:
        self.fleet.shape(LinkProfile(bandwidth_kbps=scenario.bandwidth_kbps,
                                     extra_delay_ms=scenario.extra_delay_ms or 0,
                                     loss_pct=scenario.loss_pct or 0.0,
                                     base_rtt_ms=self.base_rtt_ms), self.seed)

    def teardown(self, scenario) -> None:
        self.fleet.shape(LinkProfile(base_rtt_ms=self.base_rtt_ms), self.seed)


async def _configure(link: EmulatedLink, profile: LinkProfile, seed: int | None) -> None:
    link.configure(profile, seed)


def announce_gap_fleet(loop: FixtureLoop, n_hosts: int = 20, n_serving: int = 1) -> tuple[Fleet, list[str]]:
    """``n_hosts`` sites announcing h2; all but ``n_serving`` 301 to an http/1.1-only twin."""
    fleet = Fleet(loop)
    hosts = [f"site{i:02d}.test" for i in range(n_hosts)]
    serving = set(hosts[:n_serving])
    front: dict[str, dict[str, Resource]] = {}
    legacy: dict[str, dict[str, Resource]] = {}
    for host in hosts:
        if host in serving:
            front[host] = {"/": Resource(body=html_page([]))}
        else:
            twin = "www." + host
            front[host] = {"/": redirect(f"https://{twin}/")}
            legacy[twin] = {"/": Resource(body=html_page([]))}
    fleet.add(FixtureServer(front, alpn=("h2", "http/1.1")))
    fleet.add(FixtureServer(legacy, alpn=("http/1.1",)))
    return fleet, hosts


def demo_fleet(loop: FixtureLoop, link: EmulatedLink | None = None) -> Fleet:
    """Everything ``h2scope fixtures`` exposes: a sharded page, a redirect-to-H1 site, an h1-only host."""
    fleet = Fleet(loop, link=link)
    shards = [f"s{i}.shop.test" for i in range(4)]
    sites: dict[str, dict[str, Resource]] = dict(sharded_site("shop.test", shards, 20))
    sites["redir.test"] = {"/": redirect("https://www.redir.test/")}
    sites["quic.test"] = {"/": Resource(body=html_page([]), headers=[("alt-svc", 'h3=":443"; ma=86400')])}
    fleet.add(FixtureServer(sites, alpn=("h2", "http/1.1")))
    fleet.add(FixtureServer({"www.redir.test": {"/": Resource(body=html_page([]))},
                             "legacy.test": {"/": Resource(body=html_page([]))}}, alpn=("http/1.1",)))
    fleet.add(FixtureServer({"draft.test": {"/": Resource(body=html_page([]))}}, alpn=("h2-17",)))
    return fleet
