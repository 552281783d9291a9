"""Hostname helpers: validation and registrable-domain grouping via the public suffix list."""

from __future__ import annotations

import ipaddress
import re
from functools import lru_cache
from urllib.parse import urlsplit

from publicsuffixlist import PublicSuffixList

_LABEL = re.compile(r"^(?!-)[A-Za-z0-9_-]{1,63}(?<!-)$")


@lru_cache(maxsize=1)
def _psl() -> PublicSuffixList:
    return PublicSuffixList()


def is_ip(host: str) -> bool:
    try:
        ipaddress.ip_address(host.strip("[]"))
    except ValueError:
        return False
    return True


def is_valid_hostname(host: str) -> bool:
    if not host or len(host) > 253:
        return False
    if is_ip(host):
        return True
    return all(_LABEL.match(label) for label in host.rstrip(".").split("."))


def registrable_domain(host: str) -> str:
    """Public suffix plus one label (``a.b.example.co.uk`` -> ``example.co.uk``).

    IP literals and bare suffixes are returned unchanged.
    """
    host = host.lower().rstrip(".")
    if is_ip(host):
        return host
    return _psl().privatesuffix(host) or host


def url_host(url: str) -> str:
    return (urlsplit(url).hostname or "").lower()
