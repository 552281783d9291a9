import math
import random
from datetime import datetime, timezone

import pytest
from hypothesis import assume, given, strategies as st

from h2scope.analyzer import (
    NUMERIC_METRICS, DegenerateSnapshot, DimensionMismatch, EmptyIntersection, MetricVector, UnknownMetric,
    ZeroVector, compute_metrics, cosine_similarity, empirical_cdf, nearest_rank, sharding_corpus,
    sharding_moments, stability_report, summarize, summarize_values,
)
from h2scope.fetcher.fetch import FetchError, ObjectRecord, PageSnapshot, Protocol

T0 = datetime(2026, 1, 1, tzinfo=timezone.utc)


def obj(host, i, size=100, proto=Protocol.H2):
    return ObjectRecord(f"https://{host}/{i}", host, 200, size, "image/png", proto, f"c-{host}", 0.0, 0.1)


def snapshot(layout, html_bytes=1000, inline=0, errors=(), proto=Protocol.H2):
    """layout: host -> object count, root included on the first host."""
    hosts = list(layout)
    objects = [obj(h, i) for h in hosts for i in range(layout[h])]
    root = ObjectRecord(f"https://{hosts[0]}/", hosts[0], 200, html_bytes, "text/html", proto, "c-root", 0.0, 0.05)
    objects.remove(next(o for o in objects if o.domain == hosts[0]))
    return PageSnapshot(f"https://{hosts[0]}/", proto, T0, root=root, objects=objects, inline_css_js_bytes=inline,
                        html_bytes=html_bytes, fetch_errors=list(errors), plt=0.2)


def vec(site, **kw):
    base = dict(protocol="H2", object_count=10, distinct_domains=2, distinct_registrable_domains=1,
                mean_objects_per_domain=5.0, inline_ratio=0.1, connection_count=2, total_bytes=1000,
                protocol_consistency=1.0, plt=0.5)
    base.update(kw)
    return MetricVector(site=site, **base)


def test_domain_arithmetic():
    m = compute_metrics(snapshot({"a.test": 4, "b.test": 2}))
    assert (m.object_count, m.distinct_domains, m.mean_objects_per_domain) == (6, 2, 3.0)


def test_root_only_snapshot():
    m = compute_metrics(snapshot({"solo.test": 1}))
    assert (m.object_count, m.distinct_domains, m.mean_objects_per_domain) == (1, 1, 1.0)


def test_inline_ratio_and_total_bytes():
    snap = snapshot({"a.test": 3}, html_bytes=1000, inline=800)
    m = compute_metrics(snap)
    assert m.inline_ratio == 0.8
    assert m.total_bytes == 1000 + 2 * 100


def test_registrable_and_full_host_counts():
    m = compute_metrics(snapshot({"www.site.test": 1, "s1.site.test": 2, "cdn.other.test": 1}))
    assert m.distinct_domains == 3
    assert m.distinct_registrable_domains == 2


def test_consistency_counts_transfer_failures():
    errors = [FetchError("https://x.test/a", "ProtocolUnavailable"), FetchError("https://x.test/b", "PushRejected")]
    m = compute_metrics(snapshot({"x.test": 3}, errors=errors))
    assert m.protocol_consistency == pytest.approx(3 / 4)


def test_degenerate_snapshot():
    with pytest.raises(DegenerateSnapshot):
        compute_metrics(PageSnapshot("https://x.test/", Protocol.H1, T0))


def test_compute_metrics_is_pure():
    snap = snapshot({"a.test": 4, "b.test": 2})
    assert compute_metrics(snap) == compute_metrics(snap)


def test_summary_example():
    s = summarize([vec(f"s{i}", object_count=v) for i, v in enumerate([1, 2, 2, 3])], "objects")
    assert (s.median, s.mean, s.max, s.min) == (2, 2.0, 3, 1)
    one = summarize([vec("s", object_count=7)], "object_count")
    assert one.median == one.mean == one.max == one.p90 == 7


def test_unknown_metric():
    with pytest.raises(UnknownMetric):
        summarize([vec("s")], "nope")


def test_nearest_rank_p90():
    values = list(range(1, 11))
    assert nearest_rank(values, 90) == 9
    assert nearest_rank(values, 100) == 10
    assert nearest_rank([5], 90) == 5


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=60))
def test_summary_statistics_lie_within_range(values):
    s = summarize_values("m", values)
    for stat in (s.median, s.p90):
        assert s.min <= stat <= s.max
    assert s.min - 1e-6 <= s.mean <= s.max + 1e-6


@given(st.lists(st.integers(0, 20), min_size=1, max_size=50))
def test_empirical_cdf_is_monotone_and_ends_at_one(values):
    cdf = empirical_cdf(values)
    xs = [x for x, _ in cdf]
    ys = [y for _, y in cdf]
    assert xs == sorted(set(values))
    assert all(a < b for a, b in zip(ys, ys[1:]))
    assert ys[-1] == 1.0


def test_corpus_matches_closed_form_moments():
    corpus = sharding_corpus(1000)
    moments = sharding_moments(0.37, 0.34)
    for metric, expected in moments.items():
        s = summarize(corpus, metric)
        assert s.mean == pytest.approx(expected["mean"], rel=0.01)
        assert s.median == pytest.approx(expected["median"], rel=0.01)
        assert s.p90 == pytest.approx(expected["p90"], rel=0.01)


def test_closed_form_moments_by_brute_force():
    # independent check: sum the geometric pmf directly
    p = 0.37
    pmf = [(1 - p) ** k * p for k in range(2000)]
    mean = sum((k + 1) * w for k, w in enumerate(pmf))
    cum, median = 0.0, None
    for k, w in enumerate(pmf):
        cum += w
        if cum >= 0.5 and median is None:
            median = k + 1
    m = sharding_moments(p, 0.5)["distinct_domains"]
    assert m["mean"] == pytest.approx(mean, rel=1e-12)
    assert m["median"] == median


@pytest.mark.parametrize("u,v,expected", [
    ([3, 1, 4], [3, 1, 4], 1.0),
    ([1, 0], [0, 1], 0.0),
    ([1, 2], [2, 1], 0.8),
])
def test_cosine_examples(u, v, expected):
    assert cosine_similarity(u, v) == pytest.approx(expected, abs=1e-15)


def test_cosine_errors():
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1, 2], [1])
    with pytest.raises(DimensionMismatch):
        cosine_similarity([], [])
    with pytest.raises(ZeroVector):
        cosine_similarity([0, 0], [1, 2])


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = st.integers(1, 16).flatmap(lambda n: st.tuples(st.lists(finite, min_size=n, max_size=n),
                                                         st.lists(finite, min_size=n, max_size=n)))


@given(vectors)
def test_cosine_symmetric_and_bounded(pair):
    u, v = pair
    assume(any(abs(x) > 1e-3 for x in u) and any(abs(x) > 1e-3 for x in v))
    s = cosine_similarity(u, v)
    assert -1.0 <= s <= 1.0
    assert s == pytest.approx(cosine_similarity(v, u), abs=1e-12)


@given(vectors, st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(pair, c):
    u, v = pair
    assume(any(abs(x) > 1e-3 for x in u) and any(abs(x) > 1e-3 for x in v))
    assert cosine_similarity([c * x for x in u], v) == pytest.approx(cosine_similarity(u, v), abs=1e-12)


@given(st.lists(finite, min_size=1, max_size=16).filter(lambda u: any(abs(x) > 1e-3 for x in u)))
def test_cosine_self_is_one(u):
    assert cosine_similarity(u, u) == pytest.approx(1.0, abs=1e-12)


def test_stability_identical_weeks_are_exactly_one():
    week = [vec(f"s{i}", object_count=i + 1, inline_ratio=0.0) for i in range(5)]
    rep = stability_report(week, list(reversed(week)))
    assert set(rep.similarities) == set(NUMERIC_METRICS)
    assert all(v == 1.0 for v in rep.similarities.values())
    assert rep.joined == 5


def test_stability_single_change():
    week_a = [vec(f"s{i}", object_count=i + 1) for i in range(5)]
    week_b = [vec(f"s{i}", object_count=(i + 1) * (2 if i == 2 else 1)) for i in range(5)]
    rep = stability_report(week_a, week_b)
    assert 0 < rep.similarities["object_count"] < 1
    assert all(v == 1.0 for k, v in rep.similarities.items() if k != "object_count")


def test_stability_join_and_errors():
    a = [vec("s1"), vec("s2")]
    b = [vec("s2"), vec("s3")]
    rep = stability_report(a, b, ["objects"])
    assert (rep.joined, rep.only_a, rep.only_b) == (1, 1, 1)
    assert list(rep.similarities) == ["object_count"]
    with pytest.raises(EmptyIntersection):
        stability_report([vec("x")], [vec("y")])
    with pytest.raises(ValueError):
        stability_report([vec("x"), vec("x")], [vec("x")])


def test_stability_zero_columns():
    a = [vec("s1", inline_ratio=0.0), vec("s2", inline_ratio=0.0)]
    b = [vec("s1", inline_ratio=0.0), vec("s2", inline_ratio=0.5)]
    assert stability_report(a, a).similarities["inline_ratio"] == 1.0
    assert stability_report(a, b).similarities["inline_ratio"] == 0.0


def test_metric_vector_round_trip():
    from h2scope._util import jsonable
    v = vec("s1")
    assert MetricVector.from_dict(jsonable(v)) == v


def test_cosine_random_pairs_against_angle_oracle():
    rng = random.Random(5)
    for _ in range(200):
        n = rng.randint(1, 16)
        u = [rng.uniform(-5, 5) for _ in range(n)]
        v = [rng.uniform(-5, 5) for _ in range(n)]
        # law of cosines: |u - v|^2 = |u|^2 + |v|^2 - 2|u||v|cos
        nu, nv = math.dist(u, [0] * n), math.dist(v, [0] * n)
        expected = (nu ** 2 + nv ** 2 - math.dist(u, v) ** 2) / (2 * nu * nv)
        assert cosine_similarity(u, v) == pytest.approx(expected, abs=1e-9)
