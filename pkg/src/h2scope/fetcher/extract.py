"""Static extraction of embedded object references from HTML and CSS.

Parsing is best-effort: broken markup yields whatever references are
recoverable and never raises. Scripts are not executed, so objects created
at runtime are invisible here by construction.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from html.parser import HTMLParser
from urllib.parse import urljoin, urlsplit, urlunsplit


class Origin(str, enum.Enum):
    HTML_ATTR = "HTML_ATTR"
    CSS_URL = "CSS_URL"
    INLINE = "INLINE"


@dataclass(frozen=True)
class ObjectRef:
    url: str | None
    origin_tag: Origin
    discovered_from: str
    inline_bytes: int = 0


# tag -> attributes holding a fetchable reference
_SRC_ATTRS = {
    "img": ("src",),
    "script": ("src",),
    "iframe": ("src",),
    "frame": ("src",),
    "embed": ("src",),
    "source": ("src",),
    "track": ("src",),
    "audio": ("src",),
    "video": ("src", "poster"),
    "input": ("src",),
    "object": ("data",),
}
_SRCSET_TAGS = {"img", "source"}
_LINK_RELS = {"stylesheet", "icon", "shortcut", "apple-touch-icon", "preload", "modulepreload", "manifest"}

_CSS_URL = re.compile(r"""url\(\s*(?:"([^"]*)"|'([^']*)'|([^)"'\s]*))\s*\)""", re.IGNORECASE)
_CSS_IMPORT = re.compile(r"""@import\s+(?:"([^"]+)"|'([^']+)')""", re.IGNORECASE)
_CSS_COMMENT = re.compile(r"/\*.*?\*/", re.DOTALL)


def _normalize(raw: str, base: str) -> str | None:
    raw = raw.strip()
    if not raw or raw.startswith(("data:", "javascript:", "about:", "mailto:", "blob:", "#")):
        return None
    url = urljoin(base, raw)
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.hostname:
        return None
    return urlunsplit((parts.scheme, parts.netloc.lower(), parts.path or "/", parts.query, ""))


def css_references(css: str, base_url: str, discovered_from: str | None = None) -> list[ObjectRef]:
    source = discovered_from or base_url
    css = _CSS_COMMENT.sub("", css)
    found: list[tuple[int, str]] = []
    for m in _CSS_URL.finditer(css):
        found.append((m.start(), next(g for g in m.groups() if g is not None)))
    for m in _CSS_IMPORT.finditer(css):
        found.append((m.start(), m.group(1) or m.group(2)))
    refs = []
    for _, raw in sorted(found):
        url = _normalize(raw, base_url)
        if url is not None:
            refs.append(ObjectRef(url, Origin.CSS_URL, source))
    return refs


class _PageParser(HTMLParser):
    def __init__(self, base_url: str):
        super().__init__(convert_charrefs=True)
        self.base_url = base_url
        self.page_url = base_url
        self.refs: list[ObjectRef] = []
        self.inline_bytes = 0
        self._raw_tag: str | None = None
        self._raw_len = 0
        self._raw_text: list[str] = []

    def _add(self, raw: str | None, origin: Origin = Origin.HTML_ATTR) -> None:
        if raw is None:
            return
        url = _normalize(raw, self.base_url)
        if url is not None:
            self.refs.append(ObjectRef(url, origin, self.page_url))

    def handle_starttag(self, tag: str, attrs: list[tuple[str, str | None]]) -> None:
        a = {k.lower(): v for k, v in attrs if v is not None}
        if tag == "base" and "href" in a:
            self.base_url = urljoin(self.page_url, a["href"])
        elif tag == "link":
            rels = set((a.get("rel") or "").lower().split())
            if rels & _LINK_RELS:
                self._add(a.get("href"))
        else:
            for attr in _SRC_ATTRS.get(tag, ()):
                self._add(a.get(attr))
            if tag in _SRCSET_TAGS and "srcset" in a:
                for candidate in a["srcset"].split(","):
                    self._add(candidate.strip().split(" ")[0] if candidate.strip() else None)
        if "style" in a:
            self.refs.extend(css_references(a["style"], self.base_url, self.page_url))
        if tag in ("style", "script"):
            self._raw_tag = tag
            self._raw_len = 0
            self._raw_text = []

    def handle_startendtag(self, tag: str, attrs: list[tuple[str, str | None]]) -> None:
        self.handle_starttag(tag, attrs)
        if tag in ("style", "script"):
            self._close_raw()

    def handle_data(self, data: str) -> None:
        if self._raw_tag is not None:
            self._raw_len += len(data.encode("utf-8", "surrogateescape"))
            if self._raw_tag == "style":
                self._raw_text.append(data)

    def handle_endtag(self, tag: str) -> None:
        if tag == self._raw_tag:
            self._close_raw()

    def _close_raw(self) -> None:
        if self._raw_tag == "style" and self._raw_text:
            self.refs.extend(css_references("".join(self._raw_text), self.base_url, self.page_url))
        if self._raw_len:
            self.inline_bytes += self._raw_len
            self.refs.append(ObjectRef(None, Origin.INLINE, self.page_url, self._raw_len))
        self._raw_tag = None
        self._raw_len = 0
        self._raw_text = []


def extract_objects(document: bytes, media_type: str, base_url: str) -> tuple[list[ObjectRef], int]:
    """Embedded references plus inline style/script byte total.

    INLINE entries carry their body length and no URL. For CSS input the
    inline total is always 0.
    """
    text = document.decode("utf-8", "surrogateescape")
    kind = media_type.split(";", 1)[0].strip().lower()
    if kind == "text/css":
        return css_references(text, base_url), 0
    parser = _PageParser(base_url)
    try:
        parser.feed(text)
        parser.close()
    except Exception:
        pass
    if parser._raw_tag is not None:
        parser._close_raw()
    return parser.refs, parser.inline_bytes


def fetchable(refs: list[ObjectRef]) -> list[str]:
    """Unique fetchable URLs in first-seen order."""
    seen: dict[str, None] = {}
    for ref in refs:
        if ref.url is not None and ref.url not in seen:
            seen[ref.url] = None
    return list(seen)
