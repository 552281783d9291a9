"""Page composition and delivery metrics, distribution summaries, stability checks."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field, fields
from typing import Any, Iterable, Mapping, Sequence
from urllib.parse import urlsplit

from ._util import SCHEMA_VERSION
from .domains import registrable_domain
from .fetcher.fetch import PageSnapshot

# fetch_error kinds that represent an object the page needed but did not get
TRANSFER_FAILURES = frozenset({"ProtocolUnavailable", "ProtocolError", "HandshakeFailure", "Timeout",
                               "NetworkError"})


class DegenerateSnapshot(ValueError):
    pass


class UnknownMetric(KeyError):
    pass


class DimensionMismatch(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class EmptyIntersection(ValueError):
    pass


@dataclass
class MetricVector:
    site: str
    protocol: str
    object_count: int
    distinct_domains: int
    distinct_registrable_domains: int
    mean_objects_per_domain: float
    inline_ratio: float
    connection_count: int
    total_bytes: int
    protocol_consistency: float
    plt: float = 0.0
    schema_version: int = SCHEMA_VERSION

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "MetricVector":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


NUMERIC_METRICS = tuple(f.name for f in fields(MetricVector)
                        if f.name not in ("site", "protocol", "schema_version"))
# short names accepted on the command line
METRIC_ALIASES = {
    "objects": "object_count",
    "domains": "distinct_domains",
    "registrable_domains": "distinct_registrable_domains",
    "objects_per_domain": "mean_objects_per_domain",
    "inline": "inline_ratio",
    "connections": "connection_count",
    "bytes": "total_bytes",
    "consistency": "protocol_consistency",
}


def resolve_metric(name: str) -> str:
    name = METRIC_ALIASES.get(name, name)
    if name not in NUMERIC_METRICS:
        raise UnknownMetric(name)
    return name


def compute_metrics(snapshot: PageSnapshot) -> MetricVector:
    if snapshot.root is None:
        raise DegenerateSnapshot(f"{snapshot.root_url}: no objects fetched")
    objects = snapshot.all_objects
    hosts = {o.domain for o in objects}
    failed = sum(1 for e in snapshot.fetch_errors if e.kind in TRANSFER_FAILURES)
    on_protocol = sum(1 for o in objects if o.protocol == snapshot.protocol)
    html = snapshot.html_bytes
    return MetricVector(
        site=(urlsplit(snapshot.root_url).hostname or "").lower(),
        protocol=snapshot.protocol.value,
        object_count=len(objects),
        distinct_domains=len(hosts),
        distinct_registrable_domains=len({registrable_domain(h) for h in hosts}),
        mean_objects_per_domain=len(objects) / len(hosts),
        inline_ratio=snapshot.inline_css_js_bytes / html if html else 0.0,
        connection_count=len(snapshot.connections),
        total_bytes=snapshot.total_bytes,
        protocol_consistency=on_protocol / (len(objects) + failed),
        plt=snapshot.plt,
    )


@dataclass
class DistributionSummary:
    metric: str
    count: int
    min: float
    median: float
    mean: float
    p90: float
    max: float
    cdf_points: list[tuple[float, float]] = field(default_factory=list)


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


def empirical_cdf(values: Iterable[float]) -> list[tuple[float, float]]:
    """(value, fraction <= value) at every distinct value."""
    ordered = sorted(values)
    n = len(ordered)
    points: list[tuple[float, float]] = []
    for i, v in enumerate(ordered, 1):
        if points and points[-1][0] == v:
            points[-1] = (v, i / n)
        else:
            points.append((v, i / n))
    if points:
        points[-1] = (points[-1][0], 1.0)
    return points


def summarize_values(metric: str, values: Sequence[float]) -> DistributionSummary:
    if not values:
        raise ValueError("summarize needs at least one value")
    ordered = sorted(values)
    return DistributionSummary(
        metric=metric,
        count=len(ordered),
        min=ordered[0],
        median=statistics.median(ordered),
        mean=math.fsum(ordered) / len(ordered),
        p90=nearest_rank(ordered, 90),
        max=ordered[-1],
        cdf_points=empirical_cdf(ordered),
    )


def summarize(vectors: Sequence[MetricVector], metric: str) -> DistributionSummary:
    name = resolve_metric(metric)
    if not vectors:
        raise ValueError("summarize needs at least one vector")
    return summarize_values(name, [getattr(v, name) for v in vectors])


def cosine_similarity(u: Sequence[float], v: Sequence[float]) -> float:
    if len(u) != len(v) or not u:
        raise DimensionMismatch(f"lengths {len(u)} and {len(v)}")
    uu = math.fsum(a * a for a in u)
    vv = math.fsum(b * b for b in v)
    if uu == 0.0 or vv == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    dot = math.fsum(a * b for a, b in zip(u, v))
    # sqrt(uu * vv) rather than sqrt(uu) * sqrt(vv): exact 1.0 when u == v
    return max(-1.0, min(1.0, dot / math.sqrt(uu * vv)))


@dataclass
class StabilityReport:
    similarities: dict[str, float]
    joined: int
    only_a: int
    only_b: int


def _by_site(vectors: Iterable[MetricVector], label: str) -> dict[str, MetricVector]:
    out: dict[str, MetricVector] = {}
    for vec in vectors:
        if vec.site in out:
            raise ValueError(f"{label}: site {vec.site} appears twice; split by protocol first")
        out[vec.site] = vec
    return out


def stability_report(week_a: Iterable[MetricVector], week_b: Iterable[MetricVector],
                     metrics: Sequence[str] | None = None) -> StabilityReport:
    """Per-metric cosine similarity between two sets of vectors joined on site.

    Each metric becomes one vector indexed by the common sites in sorted
    order. Both-zero columns count as identical (1.0); exactly one zero
    column scores 0.0.
    """
    a, b = _by_site(week_a, "week_a"), _by_site(week_b, "week_b")
    common = sorted(a.keys() & b.keys())
    if not common:
        raise EmptyIntersection("no site present in both sets")
    names = [resolve_metric(m) for m in metrics] if metrics else list(NUMERIC_METRICS)
    sims: dict[str, float] = {}
    for name in names:
        u = [float(getattr(a[s], name)) for s in common]
        v = [float(getattr(b[s], name)) for s in common]
        u_zero, v_zero = not any(u), not any(v)
        if u_zero and v_zero:
            sims[name] = 1.0
        elif u_zero or v_zero:
            sims[name] = 0.0
        else:
            sims[name] = cosine_similarity(u, v)
    return StabilityReport(sims, len(common), len(a.keys() - b.keys()), len(b.keys() - a.keys()))


# --- synthetic sharding corpus -------------------------------------------

def _geom_quantile(q: float, p: float) -> int:
    """Smallest k >= 0 with P(G <= k) >= q for G ~ failures-before-success, success prob p."""
    k = math.ceil(math.log1p(-q) / math.log1p(-p) - 1e-12) - 1
    return max(0, k)


def sharding_moments(p_domains: float, p_objects: float) -> dict[str, dict[str, float]]:
    """Closed-form mean / median / p90 of the corpus generator's distributions.

    domains = 1 + Geom(p_domains), objects-per-domain = 1 + Geom(p_objects).
    """
    out = {}
    for metric, p in (("distinct_domains", p_domains), ("mean_objects_per_domain", p_objects)):
        out[metric] = {
            "mean": 1 + (1 - p) / p,
            "median": 1 + _geom_quantile(0.5, p),
            "p90": 1 + _geom_quantile(0.9, p),
        }
    return out


def sharding_corpus(n: int, p_domains: float = 0.37, p_objects: float = 0.34,
                    stride: int = 7919) -> list[MetricVector]:
    """Deterministic stratified corpus: site i draws its quantiles at (i + 0.5) / n.

    Objects-per-domain quantiles are visited in a strided order so the two
    dimensions are decorrelated.
    """
    if math.gcd(stride, n) != 1:
        raise ValueError("stride must be coprime with n")
    vectors = []
    for i in range(n):
        d = 1 + _geom_quantile((i + 0.5) / n, p_domains)
        k = 1 + _geom_quantile(((i * stride) % n + 0.5) / n, p_objects)
        vectors.append(MetricVector(
            site=f"site{i:05d}.test", protocol="H2", object_count=d * k, distinct_domains=d,
            distinct_registrable_domains=1, mean_objects_per_domain=float(k), inline_ratio=0.0,
            connection_count=d, total_bytes=d * k * 10_000, protocol_consistency=1.0,
        ))
    return vectors
