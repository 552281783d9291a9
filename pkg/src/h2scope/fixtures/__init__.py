"""Hermetic fixture servers, canned sites and in-process link emulation."""

from .netem import EmulatedLink, LinkProfile, LinkProxy
from .server import FixtureLoop, FixtureServer, Resource, redirect
from .sites import Fleet, FleetShaper, announce_gap_fleet, demo_fleet, html_page, inline_fraction_html, sharded_site

__all__ = [
    "EmulatedLink", "Fleet", "FleetShaper", "FixtureLoop", "FixtureServer", "LinkProfile", "LinkProxy", "Resource",
    "announce_gap_fleet", "demo_fleet", "html_page", "inline_fraction_html", "redirect", "sharded_site",
]
