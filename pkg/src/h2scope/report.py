"""Reporting layer: adoption time series, organization attribution, deterministic exports."""

from __future__ import annotations

import csv
import enum
import io
import json
import os
from collections import defaultdict
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ._util import SCHEMA_VERSION, SchemaMismatch, jsonable
from .analyzer import NUMERIC_METRICS, MetricVector, empirical_cdf, summarize_values
from .bench import BenchResult, NoPairedResults, compare
from .domains import is_ip, registrable_domain
from .prober import ProbeRecord, is_h2_token
from .verifier import VerdictRecord

H2_FAMILY = "h2-family"


@dataclass(frozen=True)
class AdoptionPoint:
    date: date
    token: str
    announced_count: int
    serving_count: int


def adoption_series(probe_logs: Mapping[date, Iterable[ProbeRecord]],
                    verdict_logs: Mapping[date, Iterable[VerdictRecord]]) -> list[AdoptionPoint]:
    """Daily announced vs serving counts for every h2-family token plus the family aggregate.

    A host counts once per day. It serves if any verdict that day says
    SERVES_H2, and only hosts that announced the token count as serving it.
    """
    points: list[AdoptionPoint] = []
    for day in sorted(set(probe_logs) | set(verdict_logs)):
        tokens: dict[str, set[str]] = defaultdict(set)
        for rec in probe_logs.get(day, ()):
            tokens[rec.host].update(t for t in rec.announced if is_h2_token(t))
        serving = {v.host for v in verdict_logs.get(day, ()) if v.serves_h2}
        by_token: dict[str, set[str]] = defaultdict(set)
        for host, toks in tokens.items():
            for t in toks:
                by_token[t].add(host)
            if toks:
                by_token[H2_FAMILY].add(host)
        for token in sorted(by_token):
            hosts = by_token[token]
            points.append(AdoptionPoint(day, token, len(hosts), len(hosts & serving)))
    return points


def serve_ratio(points: Iterable[AdoptionPoint], day: date, token: str = H2_FAMILY) -> float:
    for p in points:
        if p.date == day and p.token == token:
            return p.serving_count / p.announced_count if p.announced_count else 0.0
    raise KeyError(f"no {token} point on {day}")


class AttributionSource(str, enum.Enum):
    CERT_SUBJECT = "CERT_SUBJECT"
    REGISTRABLE_DOMAIN = "REGISTRABLE_DOMAIN"


class NoAttributionSource(ValueError):
    pass


@dataclass(frozen=True)
class OrgAttribution:
    site: str
    organization: str
    source: AttributionSource


_ORG_KEYS = ("organizationName", "O", "organization")


def _cert_org(subject: Mapping[str, Any] | str | None) -> str | None:
    if subject is None:
        return None
    if isinstance(subject, str):
        return subject.strip() or None
    for key in _ORG_KEYS:
        value = subject.get(key)
        if isinstance(value, str) and value.strip():
            return value.strip()
    return None


def attribute_org(site: str, cert_subject: Mapping[str, Any] | str | None = None,
                  registrable: str | None = None,
                  merge_map: Mapping[str, str] | None = None) -> OrgAttribution:
    """Organization behind ``site``: certificate subject O= first, registrable domain second.

    Names are kept verbatim unless ``merge_map`` maps them to a canonical one.
    """
    org = _cert_org(cert_subject)
    source = AttributionSource.CERT_SUBJECT
    if org is None:
        source = AttributionSource.REGISTRABLE_DOMAIN
        if registrable is None and site and not is_ip(site):
            registrable = registrable_domain(site)
        org = registrable or None
    if not org:
        raise NoAttributionSource(f"{site!r}: no certificate organization and no registrable domain")
    if merge_map:
        org = merge_map.get(org, org)
    return OrgAttribution(site, org, source)


def organization_table(records: Iterable[ProbeRecord], verdicts: Iterable[VerdictRecord] = (),
                       merge_map: Mapping[str, str] | None = None) -> list[dict[str, Any]]:
    """Per organization: hosts announcing h2 and hosts serving it, largest first."""
    serving = {v.host for v in verdicts if v.serves_h2}
    rows: dict[str, dict[str, Any]] = {}
    for rec in records:
        if not rec.announces_h2:
            continue
        try:
            attr = attribute_org(rec.host, rec.cert_organization, merge_map=merge_map)
        except NoAttributionSource:
            continue
        row = rows.setdefault(attr.organization, {"organization": attr.organization, "announced": 0,
                                                  "serving": 0, "sources": set()})
        row["announced"] += 1
        row["serving"] += rec.host in serving
        row["sources"].add(attr.source.value)
    out = []
    for row in rows.values():
        row["sources"] = ",".join(sorted(row["sources"]))
        out.append(row)
    return sorted(out, key=lambda r: (-r["announced"], r["organization"]))


# --- exports --------------------------------------------------------------

METRIC_SUMMARY_FIELDS = ["metric", "count", "min", "median", "mean", "p90", "max"]
METRIC_CDF_FIELDS = ["metric", "value", "cdf"]
ADOPTION_FIELDS = ["date", "token", "announced_count", "serving_count"]
DELTA_FIELDS = ["site", "scenario", "mean_h1", "mean_h2", "delta"]
DELTA_CDF_FIELDS = ["delta", "cdf"]


def _check_versions(groups: Iterable[Iterable[Any] | None]) -> None:
    seen = set()
    for group in groups:
        for item in group or ():
            seen.add(getattr(item, "schema_version", SCHEMA_VERSION))
    if len(seen) > 1 or (seen and seen != {SCHEMA_VERSION}):
        raise SchemaMismatch(f"inputs carry schema versions {sorted(seen)}, expected {SCHEMA_VERSION}")


def _metric_tables(metrics: Sequence[MetricVector]) -> tuple[list[dict], list[dict]]:
    summary, cdf = [], []
    if not metrics:
        return summary, cdf
    for name in NUMERIC_METRICS:
        values = [getattr(m, name) for m in metrics]
        s = summarize_values(name, values)
        summary.append({k: getattr(s, k) for k in METRIC_SUMMARY_FIELDS})
        cdf.extend({"metric": name, "value": v, "cdf": c} for v, c in empirical_cdf(values))
    return summary, cdf


def _delta_tables(bench: Sequence[BenchResult]) -> tuple[list[dict], list[dict]]:
    try:
        table = compare(bench)
    except NoPairedResults:
        return [], []
    rows = [{k: getattr(r, k) for k in DELTA_FIELDS} for r in table.rows]
    return rows, [{"delta": v, "cdf": c} for v, c in table.cdf]


def _write_csv(path: Path, fields: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: jsonable(row[k]) for k in fields})
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write_json(path: Path, fields: list[str], rows: list[dict]) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "columns": fields,
           "rows": [[jsonable(r[k]) for k in fields] for r in rows]}
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def export_reports(out_dir: str | os.PathLike, *, metrics: Sequence[MetricVector] | None = None,
                   series: Sequence[AdoptionPoint] | None = None,
                   bench: Sequence[BenchResult] | None = None, fmt: str = "csv") -> list[Path]:
    """Write plot-ready tables for whichever inputs are given; returns the paths written.

    Identical inputs give byte-identical files. Empty inputs give header-only
    tables.
    """
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown export format {fmt!r}")
    _check_versions([metrics, bench])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write = _write_csv if fmt == "csv" else _write_json
    tables: list[tuple[str, list[str], list[dict]]] = []
    if metrics is not None:
        summary, cdf = _metric_tables(sorted(metrics, key=lambda m: (m.site, m.protocol)))
        tables += [("metrics_summary", METRIC_SUMMARY_FIELDS, summary), ("metrics_cdf", METRIC_CDF_FIELDS, cdf)]
    if series is not None:
        rows = [vars(p) for p in sorted(series, key=lambda p: (p.date, p.token))]
        tables.append(("adoption", ADOPTION_FIELDS, rows))
    if bench is not None:
        rows, cdf = _delta_tables(bench)
        tables += [("plt_delta", DELTA_FIELDS, rows), ("plt_delta_cdf", DELTA_CDF_FIELDS, cdf)]
    paths = []
    for name, fields, rows in tables:
        path = out / f"{name}.{fmt}"
        write(path, fields, rows)
        paths.append(path)
    return paths
