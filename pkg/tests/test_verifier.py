import asyncio

import pytest

from h2scope.fixtures import FixtureServer, Resource, html_page, redirect
from h2scope.verifier import (
    DEFAULT_MAX_REDIRECTS, RedirectChain, Verdict, VerdictRecord, VerifyConfig, verify_h2, verify_many,
)


@pytest.fixture
def fleet(serve):
    front = serve(FixtureServer({
        "ok.test": {"/": Resource(body=html_page([]))},
        "moved.test": {"/": redirect("https://www.moved.test/")},
        "hop.test": {"/": redirect("https://ok.test/")},
        "loop-a.test": {"/": redirect("https://loop-b.test/")},
        "loop-b.test": {"/": redirect("https://loop-a.test/")},
        "error.test": {"/": Resource(status=500, body=b"boom")},
    }))
    legacy = serve(FixtureServer({"www.moved.test": {"/": Resource(body=b"old")},
                                  "h1only.test": {"/": Resource(body=b"old")}}, alpn=["http/1.1"]))
    broken = serve(FixtureServer({"broken.test": {"/": Resource(body=b"x")}}, broken_h2=True))
    mapping = {h: ("127.0.0.1", front) for h in
               ["ok.test", "moved.test", "hop.test", "loop-a.test", "loop-b.test", "error.test"]}
    mapping.update({"www.moved.test": ("127.0.0.1", legacy), "h1only.test": ("127.0.0.1", legacy),
                    "broken.test": ("127.0.0.1", broken)})
    return VerifyConfig(connect_to=mapping, connect_timeout=3, request_timeout=5)


def test_serves_h2(fleet):
    rec = verify_h2("ok.test", cfg=fleet)
    assert rec.classification is Verdict.SERVES_H2 and rec.serves_h2
    assert rec.root_size == len(html_page([]))
    assert [h.protocol for h in rec.chain.hops] == ["H2"]
    assert rec.chain.terminal_status == 200


def test_redirect_to_h1(fleet):
    rec = verify_h2("moved.test", cfg=fleet)
    assert rec.classification is Verdict.REDIRECT_TO_H1
    assert rec.chain.hops[0].protocol == "H2" and rec.chain.hops[0].status == 301
    assert rec.chain.hops[-1].protocol == "H1"
    assert rec.terminal_domain == "www.moved.test"
    assert not rec.serves_h2


def test_cross_domain_h2_redirect_is_attributed_to_original_host(fleet):
    rec = verify_h2("hop.test", cfg=fleet)
    assert rec.classification is Verdict.SERVES_H2
    assert rec.host == "hop.test" and rec.terminal_domain == "ok.test"


def test_h1_only_root(fleet):
    rec = verify_h2("h1only.test", cfg=fleet)
    assert rec.classification is Verdict.H1_ONLY_ROOT


@pytest.mark.parametrize("limit", [0, 3, DEFAULT_MAX_REDIRECTS])
def test_redirect_cycle_is_bounded(fleet, limit):
    rec = verify_h2("loop-a.test", max_redirects=limit, cfg=fleet)
    assert rec.classification is Verdict.PROTOCOL_ERROR and rec.reason == "RedirectLoop"
    assert len(rec.chain.hops) == limit + 1


def test_non_200_over_h2_is_protocol_error(fleet):
    rec = verify_h2("error.test", cfg=fleet)
    assert rec.classification is Verdict.PROTOCOL_ERROR
    assert rec.reason == "HttpStatus 500"


def test_broken_framing_is_protocol_error(fleet):
    assert verify_h2("broken.test", cfg=fleet).classification is Verdict.PROTOCOL_ERROR


def test_unreachable_is_network_error():
    cfg = VerifyConfig(connect_to={"gone.test": ("127.0.0.1", 1)}, connect_timeout=2)
    rec = verify_h2("gone.test", cfg=cfg)
    assert rec.classification is Verdict.NETWORK_ERROR
    assert rec.chain.hops == []


def test_verify_is_idempotent(fleet):
    a, b = verify_h2("moved.test", cfg=fleet), verify_h2("moved.test", cfg=fleet)
    assert (a.classification, [vars(h) for h in a.chain.hops]) == (b.classification, [vars(h) for h in b.chain.hops])


def test_verify_many_keeps_order_and_round_trips(fleet):
    hosts = ["ok.test", "moved.test", "error.test", "h1only.test"] * 3
    recs = asyncio.run(verify_many(hosts, cfg=fleet, parallel=50))
    assert [r.host for r in recs] == hosts
    for r in recs:
        from h2scope._util import jsonable
        again = VerdictRecord.from_dict(jsonable(r.to_dict()))
        assert again.classification is r.classification
        assert [vars(h) for h in again.chain.hops] == [vars(h) for h in r.chain.hops]


def test_empty_chain_terminal_status():
    assert RedirectChain().terminal_status == 0
