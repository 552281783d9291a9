"""Length-prefixed JSON messages between master and workers.

Each frame is a 4-byte big-endian length followed by a UTF-8 JSON object.
Every message carries ``kind``, ``protocol_version`` and ``worker_id``.
"""

from __future__ import annotations

import asyncio
import json
import struct
from typing import Any

from .._util import jsonable

PROTOCOL_VERSION = 1
KINDS = frozenset({"hello", "task", "report", "bye"})
MAX_FRAME = 64 * 1024 * 1024
_LEN = struct.Struct(">I")


class WireError(ValueError):
    pass


def message(kind: str, worker_id: str, **fields: Any) -> dict[str, Any]:
    if kind not in KINDS:
        raise WireError(f"unknown message kind {kind!r}")
    return {"kind": kind, "protocol_version": PROTOCOL_VERSION, "worker_id": worker_id, **fields}


def encode(msg: dict[str, Any]) -> bytes:
    body = json.dumps(jsonable(msg), sort_keys=True, separators=(",", ":")).encode()
    if len(body) > MAX_FRAME:
        raise WireError(f"frame of {len(body)} bytes exceeds limit")
    return _LEN.pack(len(body)) + body


def decode(body: bytes) -> dict[str, Any]:
    try:
        msg = json.loads(body)
    except ValueError as exc:
        raise WireError(f"malformed frame: {exc}") from None
    if not isinstance(msg, dict):
        raise WireError("frame is not a JSON object")
    if msg.get("protocol_version") != PROTOCOL_VERSION:
        raise WireError(f"protocol_version {msg.get('protocol_version')!r} not supported")
    if msg.get("kind") not in KINDS:
        raise WireError(f"unknown message kind {msg.get('kind')!r}")
    if not isinstance(msg.get("worker_id"), str) or not msg["worker_id"]:
        raise WireError("missing worker_id")
    return msg


async def send(writer: asyncio.StreamWriter, msg: dict[str, Any]) -> None:
    writer.write(encode(msg))
    await writer.drain()


async def recv(reader: asyncio.StreamReader) -> dict[str, Any] | None:
    """Next message, or None on a clean EOF at a frame boundary."""
    try:
        head = await reader.readexactly(_LEN.size)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise WireError("truncated frame header") from None
    (length,) = _LEN.unpack(head)
    if length > MAX_FRAME:
        raise WireError(f"frame of {length} bytes exceeds limit")
    try:
        body = await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise WireError("truncated frame body") from None
    return decode(body)
