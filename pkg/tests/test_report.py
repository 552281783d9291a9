import json
from datetime import date, datetime, timedelta, timezone

import pytest
from hypothesis import given, strategies as st

from h2scope._util import SchemaMismatch
from h2scope.analyzer import MetricVector
from h2scope.bench import BenchResult
from h2scope.fetcher.fetch import Protocol
from h2scope.prober import Mechanism, ProbeRecord
from h2scope.report import (
    H2_FAMILY, AdoptionPoint, AttributionSource, NoAttributionSource, adoption_series, attribute_org,
    export_reports, organization_table, serve_ratio,
)
from h2scope.verifier import Verdict, VerdictRecord

TS = datetime(2026, 1, 1, tzinfo=timezone.utc)
D0 = date(2026, 1, 5)


def probe(host, announced, org=None):
    return ProbeRecord(host, 443, TS, Mechanism.ALPN, list(announced), announced[0] if announced else None,
                       cert_organization=org)


def verdict(host, cls=Verdict.SERVES_H2):
    return VerdictRecord(host, TS, cls)


def test_adoption_example():
    probes = {D0: [probe("a.test", ["h2", "http/1.1"]), probe("b.test", ["h2"]), probe("c.test", ["h2"]),
                   probe("d.test", ["http/1.1"])]}
    verdicts = {D0: [verdict("a.test"), verdict("b.test", Verdict.H1_ONLY_ROOT),
                     verdict("c.test", Verdict.REDIRECT_TO_H1), verdict("d.test")]}
    series = adoption_series(probes, verdicts)
    assert AdoptionPoint(D0, "h2", 3, 1) in series
    assert AdoptionPoint(D0, H2_FAMILY, 3, 1) in series
    assert {p.token for p in series} == {"h2", H2_FAMILY}
    assert serve_ratio(series, D0, "h2") == pytest.approx(1 / 3)
    with pytest.raises(KeyError):
        serve_ratio(series, D0, "h2-14")


def test_draft_tokens_and_family():
    probes = {D0: [probe("a.test", ["h2", "h2-17"]), probe("b.test", ["h2-14"]), probe("c.test", ["spdy/3.1"])]}
    series = adoption_series(probes, {D0: [verdict("b.test")]})
    got = {p.token: (p.announced_count, p.serving_count) for p in series}
    assert got == {"h2": (1, 0), "h2-17": (1, 0), "h2-14": (1, 1), H2_FAMILY: (2, 1)}


def test_week_with_midweek_withdrawal():
    probes, verdicts = {}, {}
    for i in range(7):
        day = D0 + timedelta(days=i)
        probes[day] = [probe("x.test", ["h2"]), probe("y.test", ["h2"] if i < 3 else ["http/1.1"])]
        verdicts[day] = [verdict("x.test"), verdict("y.test")]
    series = adoption_series(probes, verdicts)
    h2 = [p for p in series if p.token == "h2"]
    assert [p.announced_count for p in h2] == [2, 2, 2, 1, 1, 1, 1]
    assert [p.serving_count for p in h2] == [2, 2, 2, 1, 1, 1, 1]
    assert [p.date for p in h2] == sorted(p.date for p in h2)


hosts = st.sampled_from([f"s{i}.test" for i in range(6)])
day_probes = st.lists(st.tuples(hosts, st.lists(st.sampled_from(["h2", "h2-14", "http/1.1"]), max_size=3)),
                      max_size=8)
day_verdicts = st.lists(st.tuples(hosts, st.sampled_from(list(Verdict))), max_size=8)


@given(day_probes, day_verdicts, st.randoms())
def test_series_invariants(raw_probes, raw_verdicts, rnd):
    probes = [probe(h, a) for h, a in raw_probes]
    verdicts = [verdict(h, v) for h, v in raw_verdicts]
    series = adoption_series({D0: probes}, {D0: verdicts})
    for p in series:
        assert 0 <= p.serving_count <= p.announced_count
        assert p.announced_count > 0
    rnd.shuffle(probes)
    rnd.shuffle(verdicts)
    assert adoption_series({D0: probes}, {D0: verdicts}) == series


def test_attribute_org():
    a = attribute_org("www.example.co.uk", {"organizationName": "Example Ltd"})
    assert (a.organization, a.source) == ("Example Ltd", AttributionSource.CERT_SUBJECT)
    b = attribute_org("www.example.co.uk")
    assert (b.organization, b.source) == ("example.co.uk", AttributionSource.REGISTRABLE_DOMAIN)
    assert attribute_org("cdn.test", "Google Inc.").organization == "Google Inc."
    merged = attribute_org("x.test", "Google Inc.", merge_map={"Google Inc.": "Google"})
    assert merged.organization == "Google"
    with pytest.raises(NoAttributionSource):
        attribute_org("192.0.2.1")
    with pytest.raises(NoAttributionSource):
        attribute_org("")


def test_organization_table():
    records = [probe("a.g.test", ["h2"], "G"), probe("b.g.test", ["h2"], "G"), probe("c.test", ["h2"]),
               probe("d.test", ["http/1.1"], "G")]
    rows = organization_table(records, [verdict("a.g.test")])
    assert rows[0] == {"organization": "G", "announced": 2, "serving": 1, "sources": "CERT_SUBJECT"}
    assert rows[1]["organization"] == "c.test" and rows[1]["sources"] == "REGISTRABLE_DOMAIN"


def metric(site, proto="h2", objects=10, version=1):
    return MetricVector(site, proto, objects, 2, 2, objects / 2, 0.5, 2, 1000 * objects, 1.0, 0.5,
                        schema_version=version)


def bench():
    return [BenchResult("s", "baseline", Protocol.H1, [1.2, 1.4]), BenchResult("s", "baseline", Protocol.H2, [1.0]),
            BenchResult("t", "baseline", Protocol.H1, [2.0]), BenchResult("t", "baseline", Protocol.H2, [2.5])]


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_export_is_deterministic(tmp_path, fmt):
    metrics = [metric("a"), metric("b", objects=20)]
    series = [AdoptionPoint(D0, "h2", 3, 1), AdoptionPoint(D0, H2_FAMILY, 3, 1)]
    first = export_reports(tmp_path / "1", metrics=metrics, series=series, bench=bench(), fmt=fmt)
    second = export_reports(tmp_path / "2", metrics=metrics[::-1], series=series[::-1], bench=bench()[::-1],
                            fmt=fmt)
    assert [p.name for p in first] == [p.name for p in second]
    assert {p.stem for p in first} == {"metrics_summary", "metrics_cdf", "adoption", "plt_delta", "plt_delta_cdf"}
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()


def test_export_values(tmp_path):
    export_reports(tmp_path, bench=bench())
    lines = (tmp_path / "plt_delta.csv").read_text().splitlines()
    assert lines[0] == "site,scenario,mean_h1,mean_h2,delta"
    s = lines[1].split(",")
    assert s[0] == "s" and float(s[4]) == pytest.approx(0.3)
    export_reports(tmp_path, bench=bench(), fmt="json")
    doc = json.loads((tmp_path / "plt_delta_cdf.json").read_text())
    assert doc["rows"] == [[pytest.approx(-0.5), 0.5], [pytest.approx(0.3), 1.0]]


def test_empty_inputs_give_headers(tmp_path):
    paths = export_reports(tmp_path, metrics=[], series=[], bench=[])
    for p in paths:
        assert len(p.read_text().splitlines()) == 1


def test_schema_mismatch(tmp_path):
    with pytest.raises(SchemaMismatch):
        export_reports(tmp_path, metrics=[metric("a"), metric("b", version=2)])
    with pytest.raises(ValueError):
        export_reports(tmp_path, metrics=[], fmt="xml")
