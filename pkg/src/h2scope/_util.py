"""Small shared helpers: strictly increasing UTC clock, NDJSON I/O, schema checks."""

from __future__ import annotations

import dataclasses
import enum
import json
import os
import threading
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator

SCHEMA_VERSION = 1


class SchemaMismatch(ValueError):
    pass


_clock_lock = threading.Lock()
_last_now: datetime | None = None


def utc_now() -> datetime:
    """Current UTC time, strictly greater than any value previously returned."""
    global _last_now
    with _clock_lock:
        now = datetime.now(timezone.utc)
        if _last_now is not None and now <= _last_now:
            now = _last_now + timedelta(microseconds=1)
        _last_now = now
        return now


def iso(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


def parse_iso(value: str) -> datetime:
    if value.endswith("Z"):
        value = value[:-1] + "+00:00"
    ts = datetime.fromisoformat(value)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts


def jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if not f.name.startswith("_")}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, datetime):
        return iso(obj)
    if isinstance(obj, date):
        return obj.isoformat()
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, separators=(",", ":"))


def check_schema(doc: dict, where: str = "record") -> dict:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaMismatch(f"{where}: schema_version {version!r}, expected {SCHEMA_VERSION}")
    return doc


def read_ndjson(path: str | os.PathLike, *, schema_check: bool = True) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            if schema_check:
                check_schema(doc, f"{path}:{lineno}")
            yield doc


class NdjsonSink:
    """Append-only NDJSON writer; one locked write per record so concurrent producers never interleave."""

    def __init__(self, path: str | os.PathLike | None, mode: str = "w", stream: Any = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._owned = self.path is not None
        self._fh = open(self.path, mode, encoding="utf-8") if self.path else stream
        self.count = 0

    def write(self, record: Any) -> None:
        line = dumps(record) + "\n"
        with self._lock:
            if self._fh is not None:
                self._fh.write(line)
                self._fh.flush()
            self.count += 1

    def close(self) -> None:
        if self._fh is not None and self._owned:
            self._fh.close()
        self._fh = None

    def __enter__(self) -> "NdjsonSink":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def write_ndjson(path: str | os.PathLike, records: Iterable[Any]) -> int:
    with NdjsonSink(path) as sink:
        for rec in records:
            sink.write(rec)
        return sink.count
