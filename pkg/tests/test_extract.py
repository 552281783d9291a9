import pytest
from hypothesis import given, strategies as st

from h2scope.fetcher.extract import Origin, css_references, extract_objects, fetchable
from h2scope.fixtures import inline_fraction_html

BASE = "https://x.test/index.html"


def test_img_and_script():
    refs, inline = extract_objects(b'<img src="a.png"><script src="b.js"></script>', "text/html", BASE)
    assert fetchable(refs) == ["https://x.test/a.png", "https://x.test/b.js"]
    assert inline == 0


def test_css_url_is_resolved_against_stylesheet():
    refs = css_references("body{background:url(bg.png)}", "https://x.test/s.css")
    assert [r.url for r in refs] == ["https://x.test/bg.png"]
    assert refs[0].origin_tag is Origin.CSS_URL


def test_css_media_type_dispatch():
    refs, inline = extract_objects(b"@import 'a.css'; p{background:url(\"i.png\")}", "text/css; charset=utf-8",
                                   "https://x.test/css/s.css")
    assert fetchable(refs) == ["https://x.test/css/a.css", "https://x.test/css/i.png"]
    assert inline == 0


@pytest.mark.parametrize("total,fraction", [(1000, 0.8), (1000, 0.5), (4000, 0.95), (1000, 0.0)])
def test_inline_bytes(total, fraction):
    doc = inline_fraction_html(total, fraction)
    assert len(doc) == total
    refs, inline = extract_objects(doc, "text/html", BASE)
    assert inline == round(total * fraction)
    assert sum(r.inline_bytes for r in refs if r.origin_tag is Origin.INLINE) == inline


def test_inline_bytes_count_utf8_bytes():
    body = "é" * 10
    _, inline = extract_objects(f"<style>{body}</style>".encode(), "text/html", BASE)
    assert inline == 20


def test_link_rels_srcset_base_and_style_attr():
    doc = b"""<html><head><base href="https://cdn.test/assets/">
    <link rel="stylesheet" href="main.css"><link rel="canonical" href="/ignored">
    <link rel="icon" href="/favicon.ico"></head>
    <body style="background:url('bg.jpg')"><img srcset="a1.png 1x, a2.png 2x">
    <a href="/page">not an object</a><img src="data:image/png;base64,AAAA"><img src="a1.png"></body></html>"""
    refs, _ = extract_objects(doc, "text/html", BASE)
    assert fetchable(refs) == [
        "https://cdn.test/assets/main.css", "https://cdn.test/favicon.ico", "https://cdn.test/assets/bg.jpg",
        "https://cdn.test/assets/a1.png", "https://cdn.test/assets/a2.png",
    ]


def test_style_block_urls_and_comments():
    doc = b"<style>/* url(skip.png) */ .a{background:url(keep.png)}</style>"
    refs, inline = extract_objects(doc, "text/html", BASE)
    assert fetchable(refs) == ["https://x.test/keep.png"]
    assert inline == len(b"/* url(skip.png) */ .a{background:url(keep.png)}")


def test_unclosed_markup_is_best_effort():
    refs, inline = extract_objects(b'<html><img src="a.png"><script>var x = 1', "text/html", BASE)
    assert fetchable(refs) == ["https://x.test/a.png"]
    assert inline == len(b"var x = 1")


@given(st.binary(max_size=400))
def test_extraction_never_raises_and_is_deterministic(data):
    first = extract_objects(data, "text/html", BASE)
    assert first == extract_objects(data, "text/html", BASE)
    for ref in first[0]:
        assert ref.url is None or ref.url.startswith(("http://", "https://"))


@given(st.lists(st.sampled_from(["a.png", "b.png", "c.js", "d.css"]), max_size=12))
def test_fetchable_dedupes_in_first_seen_order(names):
    html = "".join(f'<img src="{n}">' for n in names).encode()
    refs, _ = extract_objects(html, "text/html", BASE)
    assert fetchable(refs) == [f"https://x.test/{n}" for n in dict.fromkeys(names)]
