"""``h2scope`` command line.

Exit codes: 0 success, 1 finished with per-item failures recorded, 2 fatal.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import sys
import time
from collections import defaultdict
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Sequence

from . import __version__
from ._util import NdjsonSink, SchemaMismatch, read_ndjson

log = logging.getLogger("h2scope")

EXIT_OK, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2


class UsageError(Exception):
    pass


# --- input helpers ------------------------------------------------------------

def read_targets(path: str, www: bool = False) -> list[str]:
    """Hosts from a plain list (one per line) or a ``rank,domain`` CSV; deduplicated, order kept."""
    hosts: dict[str, None] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh):
            cells = [c.strip() for c in row if c.strip()]
            if not cells or cells[0].startswith("#"):
                continue
            host = cells[-1].lower().rstrip(".")
            if host in ("domain", "host", "site"):
                continue  # header row
            if "://" in host:
                host = host.split("://", 1)[1].split("/", 1)[0]
            if www and not host.startswith("www."):
                host = "www." + host
            hosts.setdefault(host, None)
    return list(hosts)


def parse_connect_to(values: Sequence[str] | None, files: Sequence[str] | None = None) -> dict[str, tuple[str, int]]:
    out: dict[str, tuple[str, int]] = {}
    for path in files or ():
        for host, (addr, port) in json.loads(Path(path).read_text()).items():
            out[host] = (addr, int(port))
    for item in values or ():
        try:
            host, target = item.split("=", 1)
            addr, port = target.rsplit(":", 1)
            out[host.lower()] = (addr.strip("[]"), int(port))
        except ValueError:
            raise UsageError(f"--connect-to expects HOST=ADDR:PORT, got {item!r}") from None
    return out


def parse_listen(value: str, default_host: str = "0.0.0.0") -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    try:
        return host or default_host, int(port)
    except ValueError:
        raise UsageError(f"expected HOST:PORT or :PORT, got {value!r}") from None


@contextmanager
def output(path: str | None) -> Iterator[NdjsonSink]:
    """NDJSON sink on a file, or on stdout for ``-``/unset."""
    if path in (None, "-"):
        with NdjsonSink(None, stream=sys.stdout) as sink:
            yield sink
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with NdjsonSink(path) as sink:
            yield sink


def _load(path: str, args: argparse.Namespace) -> list[dict]:
    return list(read_ndjson(path, schema_check=args.schema_check))


# --- subcommands ----------------------------------------------------------------

def cmd_probe(args: argparse.Namespace) -> int:
    from .prober import DEFAULT_OFFER, ProbeConfig, probe_many

    hosts = read_targets(args.input, www=args.www)
    cfg = ProbeConfig(
        offered_protocols=tuple(args.offer.split(",")) if args.offer else DEFAULT_OFFER,
        connect_timeout=args.timeout, handshake_timeout=args.timeout,
        check_cleartext=not args.no_cleartext, connect_to=parse_connect_to(args.connect_to, args.connect_to_file),
    )
    records = asyncio.run(probe_many(hosts, cfg, port=args.port, parallel=args.parallel))
    with output(args.out) as sink:
        for rec in records:
            sink.write(rec)
    failed = sum(1 for r in records if r.error is not None)
    log.info("probed %d hosts, %d announce h2, %d errors", len(records),
             sum(r.announces_h2 for r in records), failed)
    return EXIT_PARTIAL if failed else EXIT_OK


def _verify_targets(path: str, args: argparse.Namespace) -> list[str]:
    if path.endswith((".ndjson", ".jsonl")):
        from .prober import ProbeRecord
        return [r.host for r in map(ProbeRecord.from_dict, _load(path, args)) if r.announces_h2]
    return read_targets(path, www=args.www)


def cmd_verify(args: argparse.Namespace) -> int:
    from .verifier import Verdict, VerifyConfig, verify_many

    hosts = _verify_targets(args.input, args)
    cfg = VerifyConfig(port=args.port, connect_timeout=args.timeout,
                       connect_to=parse_connect_to(args.connect_to, args.connect_to_file))
    with output(args.out) as sink:
        verdicts = asyncio.run(verify_many(hosts, max_redirects=args.max_redirects, parallel=args.parallel,
                                           cfg=cfg, sink=sink))
    serving = sum(v.serves_h2 for v in verdicts)
    log.info("verified %d hosts, %d serve h2", len(verdicts), serving)
    if args.serving_list:
        Path(args.serving_list).write_text("".join(f"{v.host}\n" for v in verdicts if v.serves_h2))
    return EXIT_PARTIAL if any(v.classification is Verdict.NETWORK_ERROR for v in verdicts) else EXIT_OK


def _fetch_cfg(args: argparse.Namespace):
    from .fetcher.fetch import FetchConfig
    return FetchConfig(user_agent=args.user_agent.upper(), per_object_timeout=args.timeout,
                       connect_to=parse_connect_to(args.connect_to, args.connect_to_file))


def _site_list(args: argparse.Namespace) -> list[str]:
    sites = list(args.urls or [])
    if args.sites:
        sites += read_targets(args.sites)
    if not sites:
        raise UsageError("no sites given (positional URLs or --sites FILE)")
    return sites


def cmd_fetch(args: argparse.Namespace) -> int:
    from .fetcher.fetch import measure_plt

    cfg = _fetch_cfg(args)
    bad = 0
    with output(args.out) as sink:
        for site in _site_list(args):
            url = site if "://" in site else f"https://{site}/"
            for snap in measure_plt(url, args.protocol, cfg, repetitions=args.repeat):
                sink.write(snap.to_dict())
                bad += not snap.ok
    return EXIT_PARTIAL if bad else EXIT_OK


def _vectors(path: str, args: argparse.Namespace):
    from .analyzer import DegenerateSnapshot, compute_metrics
    from .fetcher.fetch import PageSnapshot

    vectors, skipped = [], 0
    for doc in _load(path, args):
        try:
            vectors.append(compute_metrics(PageSnapshot.from_dict(doc)))
        except DegenerateSnapshot as exc:
            log.warning("skipping snapshot: %s", exc)
            skipped += 1
    return vectors, skipped


def _dedupe_sites(vectors: list) -> list:
    # several repetitions per site: keep the first so the stability join is one-to-one
    seen: dict[tuple[str, str], Any] = {}
    for v in vectors:
        seen.setdefault((v.site, v.protocol), v)
    return list(seen.values())


def cmd_analyze(args: argparse.Namespace) -> int:
    from .analyzer import NUMERIC_METRICS, resolve_metric, stability_report, summarize

    vectors, skipped = _vectors(args.input, args)
    if not vectors:
        raise UsageError(f"{args.input}: no usable snapshots")
    metrics = [resolve_metric(m) for m in args.metric] if args.metric else list(NUMERIC_METRICS)
    with output(args.out) as sink:
        for v in vectors:
            sink.write(v)
    for name in metrics:
        s = summarize(vectors, name)
        print(f"{name:30s} n={s.count} min={s.min:g} median={s.median:g} mean={s.mean:g} "
              f"p90={s.p90:g} max={s.max:g}", file=sys.stderr)
    if args.cdf:
        from .report import export_reports
        for p in export_reports(args.cdf, metrics=vectors, fmt=args.format):
            log.info("wrote %s", p)
    if args.compare:
        other, _ = _vectors(args.compare, args)
        for proto in sorted({v.protocol for v in vectors}):
            a = _dedupe_sites([v for v in vectors if v.protocol == proto])
            b = _dedupe_sites([v for v in other if v.protocol == proto])
            if not b:
                continue
            rep = stability_report(a, b, metrics)
            for name, sim in rep.similarities.items():
                print(f"stability {proto} {name:30s} {sim:.6f} (joined={rep.joined})", file=sys.stderr)
    return EXIT_PARTIAL if skipped else EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    from .bench import DEFAULT_SCENARIOS, compare, load_scenarios, run_matrix, NoPairedResults

    scenarios = load_scenarios(args.scenarios) if args.scenarios else list(DEFAULT_SCENARIOS)
    protocols = [p.strip() for p in args.protocols.split(",") if p.strip()]
    with output(args.out) as sink:
        results = run_matrix(_site_list(args), scenarios, protocols, args.repeat, _fetch_cfg(args), sink=sink)
    try:
        for row in compare(results).rows:
            print(f"{row.site} [{row.scenario}] H1={row.mean_h1:.3f}s H2={row.mean_h2:.3f}s "
                  f"delta={row.delta * 1000:+.1f}ms", file=sys.stderr)
    except NoPairedResults:
        log.warning("no paired H1/H2 results to compare")
    expected = len(_site_list(args)) * len(scenarios) * len(protocols)
    failed = len(results) < expected or any(r.failures for r in results)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from .analyzer import MetricVector
    from .bench import BenchResult
    from .prober import ProbeRecord
    from .report import adoption_series, export_reports, organization_table
    from .verifier import VerdictRecord

    probes: dict = defaultdict(list)
    verdicts: dict = defaultdict(list)
    for path in args.probe_log or ():
        for rec in map(ProbeRecord.from_dict, _load(path, args)):
            probes[rec.timestamp.date()].append(rec)
    for path in args.verdict_log or ():
        for rec in map(VerdictRecord.from_dict, _load(path, args)):
            verdicts[rec.timestamp.date()].append(rec)
    metrics = None
    if args.metrics:
        metrics = [MetricVector.from_dict(d) for p in args.metrics for d in _load(p, args)]
    bench = [BenchResult.from_dict(d) for p in args.bench for d in _load(p, args)] if args.bench else None
    series = adoption_series(probes, verdicts) if (probes or verdicts) else None
    out = args.out if args.out not in (None, "-") else "reports"
    paths = export_reports(out, metrics=metrics, series=series, bench=bench, fmt=args.format)
    if probes:
        merge = json.loads(Path(args.merge_map).read_text()) if args.merge_map else None
        all_probes = [r for day in sorted(probes) for r in probes[day]]
        all_verdicts = [v for day in sorted(verdicts) for v in verdicts[day]]
        rows = organization_table(all_probes, all_verdicts, merge)
        path = Path(out) / "organizations.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["organization", "announced", "serving", "sources"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        paths.append(path)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_master(args: argparse.Namespace) -> int:
    from .coordinator.master import Master

    hosts = read_targets(args.targets, www=args.www)
    host, port = parse_listen(args.listen)
    out = args.out if args.out not in (None, "-") else "results"

    async def main() -> bool:
        master = Master(hosts, out, chunk_size=args.chunk_size)
        await master.start(host, port)
        try:
            await master.wait_done()
            # give connected workers a moment to collect their bye
            await asyncio.sleep(args.linger)
        finally:
            await master.stop()
        return master.state.done

    return EXIT_OK if asyncio.run(main()) else EXIT_PARTIAL


def cmd_worker(args: argparse.Namespace) -> int:
    from .coordinator.worker import Worker
    from .prober import ProbeConfig

    host, port = parse_listen(args.master, default_host="127.0.0.1")
    cfg = ProbeConfig(connect_timeout=args.timeout, handshake_timeout=args.timeout,
                      check_cleartext=not args.no_cleartext,
                      connect_to=parse_connect_to(args.connect_to, args.connect_to_file))
    worker = Worker(host, port, args.id, parallel=args.parallel, probe_cfg=cfg)
    done = asyncio.run(worker.run())
    log.info("worker %s finished after %d tasks", worker.worker_id, done)
    return EXIT_OK


def cmd_fixtures(args: argparse.Namespace) -> int:
    from .fixtures import EmulatedLink, FixtureLoop, LinkProfile, demo_fleet

    with FixtureLoop() as loop:
        link = None
        if args.bandwidth_kbps or args.delay_ms or args.loss_pct:
            link = EmulatedLink(LinkProfile(bandwidth_kbps=args.bandwidth_kbps, extra_delay_ms=args.delay_ms,
                                            loss_pct=args.loss_pct))
        fleet = demo_fleet(loop, link)
        mapping = {h: list(t) for h, t in sorted(fleet.connect_to.items())}
        text = json.dumps(mapping, indent=1, sort_keys=True)
        if args.out not in (None, "-"):
            Path(args.out).write_text(text + "\n")
        print(text, flush=True)
        try:
            if args.duration:
                time.sleep(args.duration)
            else:
                while True:
                    time.sleep(3600)
        except KeyboardInterrupt:
            pass
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, defaults: bool) -> None:
    # subcommands repeat the flags without defaults so they never clobber values given before the subcommand
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--out", default=d(None), help="output file (NDJSON; '-' for stdout) or directory")
    parser.add_argument("--log-level", default=d("INFO"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--schema-check", action=argparse.BooleanOptionalAction, default=d(True),
                        help="reject input records whose schema_version differs")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, defaults=False)

    net = argparse.ArgumentParser(add_help=False)
    net.add_argument("--connect-to", action="append", metavar="HOST=ADDR:PORT",
                     help="dial ADDR:PORT for HOST while keeping SNI and Host (repeatable)")
    net.add_argument("--connect-to-file", action="append", metavar="JSON",
                     help="JSON object of host -> [addr, port], as written by 'h2scope fixtures --out'")
    net.add_argument("--timeout", type=float, default=10.0)

    p = argparse.ArgumentParser(prog="h2scope", description="Measure HTTP/2 adoption and performance.")
    _global_flags(p, defaults=True)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("probe", parents=[common, net], help="discover announced protocols")
    s.add_argument("--input", required=True, help="hosts.txt or rank,domain CSV")
    s.add_argument("--www", action="store_true", help="prefix hosts with www.")
    s.add_argument("--port", type=int, default=443)
    s.add_argument("--parallel", type=int, default=20)
    s.add_argument("--offer", help="comma-separated ALPN offer list")
    s.add_argument("--no-cleartext", action="store_true", help="skip the h2c upgrade check")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("verify", parents=[common, net], help="check which announcing hosts serve h2")
    s.add_argument("--input", required=True, help="probe NDJSON (h2 announcers are taken) or a host list")
    s.add_argument("--www", action="store_true")
    s.add_argument("--port", type=int, default=443)
    s.add_argument("--parallel", type=int, default=10)
    s.add_argument("--max-redirects", type=int, default=10)
    s.add_argument("--serving-list", help="also write the SERVES_H2 hosts, one per line")
    s.set_defaults(func=cmd_verify)

    def page_args(s: argparse.ArgumentParser) -> None:
        s.add_argument("urls", nargs="*", help="site URLs or hostnames")
        s.add_argument("--sites", help="file of sites, one per line")
        s.add_argument("--user-agent", default="desktop", choices=["desktop", "mobile"])

    s = sub.add_parser("fetch", parents=[common, net], help="load pages over one protocol")
    page_args(s)
    s.add_argument("--protocol", default="h2", choices=["h1", "h2"], type=str.lower)
    s.add_argument("--repeat", type=int, default=1)
    s.set_defaults(func=cmd_fetch)

    s = sub.add_parser("analyze", parents=[common], help="metrics and distributions from snapshots")
    s.add_argument("--input", required=True, help="snapshot NDJSON")
    s.add_argument("--metric", action="append", help="metric to summarize (repeatable)")
    s.add_argument("--cdf", metavar="DIR", help="export CDF and summary tables to DIR")
    s.add_argument("--format", default="csv", choices=["csv", "json"])
    s.add_argument("--compare", metavar="NDJSON", help="second snapshot set for a stability report")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("bench", parents=[common, net], help="PLT matrix over network scenarios")
    page_args(s)
    s.add_argument("--scenarios", help="TOML file of [[scenario]] tables")
    s.add_argument("--protocols", default="h2,h1")
    s.add_argument("--repeat", type=int, default=3)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("report", parents=[common], help="adoption series and plot-ready exports")
    s.add_argument("--probe-log", action="append")
    s.add_argument("--verdict-log", action="append")
    s.add_argument("--metrics", action="append", help="metric-vector NDJSON from 'analyze'")
    s.add_argument("--bench", action="append", help="bench NDJSON")
    s.add_argument("--merge-map", help="JSON object mapping organization names to canonical ones")
    s.add_argument("--format", default="csv", choices=["csv", "json"])
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("master", parents=[common], help="coordinate a distributed probe sweep")
    s.add_argument("--targets", required=True)
    s.add_argument("--www", action="store_true")
    s.add_argument("--listen", default=":7070")
    s.add_argument("--chunk-size", type=int, default=100)
    s.add_argument("--linger", type=float, default=2.0, help="seconds to keep serving after completion")
    s.set_defaults(func=cmd_master)

    s = sub.add_parser("worker", parents=[common, net], help="probe tasks handed out by a master")
    s.add_argument("--master", required=True, metavar="HOST:PORT")
    s.add_argument("--parallel", type=int, default=20)
    s.add_argument("--id", help="worker id (default: hostname-based)")
    s.add_argument("--no-cleartext", action="store_true")
    s.set_defaults(func=cmd_worker)

    s = sub.add_parser("fixtures", parents=[common], help="run local test servers")
    s.add_argument("--duration", type=float, default=0, help="seconds to run (default: until interrupted)")
    s.add_argument("--bandwidth-kbps", type=int)
    s.add_argument("--delay-ms", type=float, default=0.0)
    s.add_argument("--loss-pct", type=float, default=0.0)
    s.set_defaults(func=cmd_fixtures)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, SchemaMismatch, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL
    except KeyboardInterrupt:
        return EXIT_FATAL
    except Exception:
        log.exception("fatal error")
        return EXIT_FATAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
