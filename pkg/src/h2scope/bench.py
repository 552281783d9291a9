"""Phase III performance matrix: PLT over H1 and H2 under labelled network scenarios.

Shaping is delegated to a *shaper*. The default one runs each scenario's
setup/teardown hook as a shell command (e.g. ``tc qdisc ...``); fixtures
supply an in-process shaper that reconfigures the emulated link instead.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol as TypingProtocol, Sequence

import filelock

from ._util import SCHEMA_VERSION, NdjsonSink, parse_iso
from .analyzer import empirical_cdf
from .fetcher.fetch import FetchConfig, Protocol, measure_plt

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10
    import tomli as tomllib

log = logging.getLogger(__name__)


class HookFailed(RuntimeError):
    pass


class NoPairedResults(ValueError):
    pass


class ConcurrentRun(RuntimeError):
    """Another matrix run holds the same scenario hooks."""


@dataclass(frozen=True)
class NetworkScenario:
    label: str
    bandwidth_kbps: int | None = None
    extra_delay_ms: int | None = None
    loss_pct: float | None = None
    setup_hook: str = ""
    teardown_hook: str = ""

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("scenario label must be non-empty")
        if self.loss_pct is not None and not 0 <= self.loss_pct <= 100:
            raise ValueError(f"loss_pct {self.loss_pct} outside [0, 100]")
        if self.bandwidth_kbps is not None and self.bandwidth_kbps <= 0:
            raise ValueError("bandwidth_kbps must be positive")
        if self.extra_delay_ms is not None and self.extra_delay_ms < 0:
            raise ValueError("extra_delay_ms must be >= 0")


DEFAULT_SCENARIOS = (
    NetworkScenario("baseline"),
    NetworkScenario("1 Mbps", bandwidth_kbps=1000),
    NetworkScenario("+100 ms", extra_delay_ms=100),
    NetworkScenario("0.5% loss", loss_pct=0.5),
    NetworkScenario("plausible mobile", bandwidth_kbps=1000, loss_pct=2.0),
)


def load_scenarios(path: str | os.PathLike[str]) -> list[NetworkScenario]:
    """Read ``[[scenario]]`` tables from a TOML file."""
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    rows = doc.get("scenario", [])
    if not isinstance(rows, list) or not rows:
        raise ValueError(f"{path}: no [[scenario]] tables")
    known = {"label", "bandwidth_kbps", "extra_delay_ms", "loss_pct", "setup_hook", "teardown_hook"}
    out = []
    for row in rows:
        extra = set(row) - known
        if extra:
            raise ValueError(f"{path}: unknown scenario keys {sorted(extra)}")
        out.append(NetworkScenario(**row))
    return out


@dataclass
class BenchResult:
    site: str
    scenario: str
    protocol: Protocol
    plt_samples: list[float] = field(default_factory=list)
    failures: int = 0
    # wall-clock start of each successful sample, parallel to plt_samples
    started_at: list[datetime] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    @property
    def mean_plt(self) -> float | None:
        if not self.plt_samples:
            return None
        return math.fsum(self.plt_samples) / len(self.plt_samples)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "site": self.site,
            "scenario": self.scenario,
            "protocol": self.protocol.value,
            "plt_samples": self.plt_samples,
            "mean_plt": self.mean_plt,
            "failures": self.failures,
            "started_at": self.started_at,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "BenchResult":
        return cls(
            site=doc["site"],
            scenario=doc["scenario"],
            protocol=Protocol.parse(doc["protocol"]),
            plt_samples=[float(x) for x in doc.get("plt_samples", [])],
            failures=int(doc.get("failures", 0)),
            started_at=[parse_iso(t) for t in doc.get("started_at", [])],
            schema_version=int(doc.get("schema_version", SCHEMA_VERSION)),
        )


class Shaper(TypingProtocol):
    lock_key: str

    def setup(self, scenario: NetworkScenario) -> None: ...

    def teardown(self, scenario: NetworkScenario) -> None: ...


class HookShaper:
    """Runs scenario hooks as shell commands; empty hooks mean a pre-shaped environment."""

    lock_key = "hooks"

    def __init__(self, timeout: float = 60.0):
        self.timeout = timeout

    def _run(self, cmd: str, what: str) -> None:
        if not cmd.strip():
            return
        log.info("%s: %s", what, cmd)
        try:
            subprocess.run(cmd, shell=True, check=True, timeout=self.timeout,
                           stdout=subprocess.PIPE, stderr=subprocess.PIPE)
        except (subprocess.CalledProcessError, subprocess.TimeoutExpired, OSError) as exc:
            raise HookFailed(f"{what} hook {cmd!r} failed: {exc}") from exc

    def setup(self, scenario: NetworkScenario) -> None:
        self._run(scenario.setup_hook, "setup")

    def teardown(self, scenario: NetworkScenario) -> None:
        self._run(scenario.teardown_hook, "teardown")


def _lock_path(scenarios: Sequence[NetworkScenario], shaper: Shaper) -> Path:
    h = hashlib.sha256(shaper.lock_key.encode())
    for s in scenarios:
        h.update(f"\0{s.setup_hook}\0{s.teardown_hook}".encode())
    return Path(tempfile.gettempdir()) / f"h2scope-bench-{h.hexdigest()[:16]}.lock"


def _site_url(site: str) -> str:
    return site if "://" in site else f"https://{site}/"


def run_matrix(sites: Sequence[str], scenarios: Sequence[NetworkScenario],
               protocols: Sequence[Protocol | str] = (Protocol.H2, Protocol.H1), repetitions: int = 3,
               cfg: FetchConfig | None = None, shaper: Shaper | None = None,
               sink: NdjsonSink | None = None) -> list[BenchResult]:
    """Measure every (scenario, site, protocol) cell sequentially.

    Order is scenario-major, site-minor; within a site the protocols
    alternate on every repetition. A scenario whose hook fails is abandoned
    and logged, and the run moves on to the next one.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    protos = [Protocol.parse(p) for p in protocols]
    if not protos:
        raise ValueError("at least one protocol is required")
    shaper = shaper or HookShaper()
    lock = filelock.FileLock(str(_lock_path(scenarios, shaper)), timeout=0)
    try:
        lock.acquire()
    except filelock.Timeout:
        raise ConcurrentRun("a matrix run with the same scenario hooks is already in progress") from None
    results: list[BenchResult] = []
    try:
        for scenario in scenarios:
            try:
                results.extend(_run_scenario(sites, scenario, protos, repetitions, cfg, shaper, sink))
            except HookFailed as exc:
                log.error("scenario %s aborted: %s", scenario.label, exc)
    finally:
        lock.release()
    return results


def _run_scenario(sites: Sequence[str], scenario: NetworkScenario, protos: list[Protocol],
                  repetitions: int, cfg: FetchConfig | None, shaper: Shaper,
                  sink: NdjsonSink | None) -> list[BenchResult]:
    out: list[BenchResult] = []
    try:
        shaper.setup(scenario)
        for site in sites:
            url = _site_url(site)
            cells = {p: BenchResult(site, scenario.label, p) for p in protos}
            for _ in range(repetitions):
                for proto in protos:
                    cell = cells[proto]
                    try:
                        snap = measure_plt(url, proto, cfg, repetitions=1)[0]
                    except Exception as exc:  # per-site failures are recorded, never fatal
                        log.warning("%s %s %s: %s", scenario.label, site, proto.value, exc)
                        cell.failures += 1
                        continue
                    if snap.ok:
                        cell.plt_samples.append(snap.plt)
                        cell.started_at.append(snap.started_at)
                    else:
                        cell.failures += 1
            for cell in cells.values():
                if sink is not None:
                    sink.write(cell.to_dict())
                out.append(cell)
    finally:
        # teardown runs even after a failed setup so partial shaping is undone
        shaper.teardown(scenario)
    return out


@dataclass
class ComparisonRow:
    site: str
    scenario: str
    mean_h1: float
    mean_h2: float
    delta: float  # mean(H1) - mean(H2); positive means H2 is faster


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]
    cdf: list[tuple[float, float]]

    def by_scenario(self, scenario: str) -> list[ComparisonRow]:
        return [r for r in self.rows if r.scenario == scenario]


def compare(results: Iterable[BenchResult]) -> ComparisonTable:
    """Per-(site, scenario) delta PLT plus the corpus CDF of deltas.

    Cells repeated across the input are pooled. The output does not depend
    on input order.
    """
    pooled: dict[tuple[str, str, Protocol], list[float]] = {}
    for r in results:
        pooled.setdefault((r.site, r.scenario, r.protocol), []).extend(r.plt_samples)
    rows = []
    for site, scenario in sorted({(s, sc) for s, sc, _ in pooled}):
        h1 = pooled.get((site, scenario, Protocol.H1))
        h2 = pooled.get((site, scenario, Protocol.H2))
        if not h1 or not h2:
            continue
        m1 = math.fsum(h1) / len(h1)
        m2 = math.fsum(h2) / len(h2)
        rows.append(ComparisonRow(site, scenario, m1, m2, m1 - m2))
    if not rows:
        raise NoPairedResults("no (site, scenario) has successful samples for both H1 and H2")
    return ComparisonTable(rows, empirical_cdf(r.delta for r in rows))
