"""h2scope: measure HTTP/2 announcement, actual service, page composition and load time."""

__version__ = "0.1.0"
