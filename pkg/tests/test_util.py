import json
from datetime import datetime, timezone

import pytest
from hypothesis import given, strategies as st

from h2scope._util import (
    SCHEMA_VERSION, NdjsonSink, SchemaMismatch, check_schema, dumps, iso, parse_iso, read_ndjson, utc_now,
    write_ndjson,
)
from h2scope.domains import is_ip, is_valid_hostname, registrable_domain, url_host


def test_utc_now_strictly_increases():
    stamps = [utc_now() for _ in range(2000)]
    assert all(a < b for a, b in zip(stamps, stamps[1:]))
    assert stamps[0].tzinfo is not None


@given(st.datetimes(min_value=datetime(1971, 1, 1), max_value=datetime(2100, 1, 1)))
def test_iso_round_trip(ts):
    ts = ts.replace(tzinfo=timezone.utc)
    assert parse_iso(iso(ts)) == ts


def test_dumps_is_canonical():
    assert dumps({"b": 1, "a": [2, 3]}) == '{"a":[2,3],"b":1}'


def test_ndjson_round_trip(tmp_path):
    path = tmp_path / "x.ndjson"
    n = write_ndjson(path, [{"schema_version": SCHEMA_VERSION, "i": i} for i in range(3)])
    assert n == 3
    assert [d["i"] for d in read_ndjson(path)] == [0, 1, 2]


def test_schema_check_rejects_other_versions(tmp_path):
    path = tmp_path / "x.ndjson"
    path.write_text(json.dumps({"schema_version": 99}) + "\n")
    with pytest.raises(SchemaMismatch):
        list(read_ndjson(path))
    assert list(read_ndjson(path, schema_check=False)) == [{"schema_version": 99}]
    with pytest.raises(SchemaMismatch):
        check_schema({})


def test_sink_counts_without_a_file():
    with NdjsonSink(None) as sink:
        sink.write({"a": 1})
    assert sink.count == 1


@pytest.mark.parametrize("host,expected", [
    ("a.b.example.co.uk", "example.co.uk"),
    ("shard1.site.test", "site.test"),
    ("www.google.com", "google.com"),
    ("127.0.0.1", "127.0.0.1"),
])
def test_registrable_domain(host, expected):
    assert registrable_domain(host) == expected


def test_hostname_helpers():
    assert is_ip("::1") and is_ip("10.0.0.1") and not is_ip("example.com")
    assert is_valid_hostname("example.com")
    assert not is_valid_hostname("bad host")
    assert not is_valid_hostname("-x.com")
    assert url_host("https://EXAMPLE.com:8443/x") == "example.com"
