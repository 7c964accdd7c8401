"""Length-prefixed JSON framing shared by the broker, control and heartbeat links.

Every frame on the wire is a 4-byte big-endian unsigned length followed by
that many bytes of UTF-8 JSON (one object).
"""
from __future__ import annotations

import asyncio
import json
import struct
import time
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping

HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 20  # 1 MiB

BROKER_CMDS = ("publish", "subscribe", "unsubscribe", "deliver", "ack", "error")


class FrameError(ValueError):
    pass


def now_ms() -> int:
    return time.time_ns() // 1_000_000


def split_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}, expected host:port")
    return host, int(port)


@dataclass(frozen=True)
class Message:
    source: str
    seq: int
    ts_published: int
    values: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"source": self.source, "seq": self.seq,
                "ts_published": self.ts_published, "values": dict(self.values)}

    @classmethod
    def from_dict(cls, d: Any) -> "Message":
        if not isinstance(d, dict):
            raise FrameError("message must be an object")
        try:
            source, seq, ts, values = d["source"], d["seq"], d["ts_published"], d["values"]
        except KeyError as exc:
            raise FrameError(f"message missing {exc.args[0]}") from None
        if not isinstance(source, str) or not isinstance(values, dict):
            raise FrameError("message source/values mistyped")
        if isinstance(seq, bool) or not isinstance(seq, int) or seq < 0:
            raise FrameError("message seq must be a non-negative integer")
        if isinstance(ts, bool) or not isinstance(ts, int):
            raise FrameError("message ts_published must be an integer")
        return cls(source, seq, ts, values)


@dataclass(frozen=True)
class Frame:
    """One broker protocol frame.

    ``subscriber`` names the subscriber on subscribe/unsubscribe/deliver
    frames; ``reason`` is only set on error frames.
    """

    cmd: str
    topic: str | None = None
    message: Message | None = None
    subscriber: str | None = None
    reason: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"cmd": self.cmd}
        if self.topic is not None:
            d["topic"] = self.topic
        if self.message is not None:
            d["message"] = self.message.to_dict()
        if self.subscriber is not None:
            d["subscriber"] = self.subscriber
        if self.reason is not None:
            d["reason"] = self.reason
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Frame":
        cmd = d.get("cmd")
        if cmd not in BROKER_CMDS:
            raise FrameError(f"unknown broker command {cmd!r}")
        msg = Message.from_dict(d["message"]) if d.get("message") is not None else None
        frame = cls(cmd, d.get("topic"), msg, d.get("subscriber"), d.get("reason"))
        if cmd in ("deliver", "publish") and (frame.topic is None or frame.message is None):
            raise FrameError(f"{cmd} frame needs topic and message")
        if cmd in ("subscribe", "unsubscribe") and (frame.topic is None or frame.subscriber is None):
            raise FrameError(f"{cmd} frame needs topic and subscriber")
        return frame


def encode_payload(obj: Mapping[str, Any]) -> bytes:
    body = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise FrameError("oversize")
    return HEADER.pack(len(body)) + body


def _decode_body(body: bytes) -> dict[str, Any]:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"malformed frame body: {exc}") from exc
    if not isinstance(obj, dict):
        raise FrameError("frame body must be a JSON object")
    return obj


def decode_payload(data: bytes) -> dict[str, Any]:
    """Decode exactly one complete frame (header included)."""
    if len(data) < HEADER.size:
        raise FrameError("truncated header")
    (length,) = HEADER.unpack_from(data)
    if length > MAX_FRAME:
        raise FrameError("oversize")
    if len(data) - HEADER.size < length:
        raise FrameError("truncated body")
    if len(data) - HEADER.size > length:
        raise FrameError("trailing bytes after frame")
    return _decode_body(data[HEADER.size:])


def encode_frame(f: Frame) -> bytes:
    return encode_payload(f.to_dict())


def decode_frame(data: bytes) -> Frame:
    return Frame.from_dict(decode_payload(data))


class FrameDecoder:
    """Incremental decoder: feed arbitrary byte chunks, get whole payloads out."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> Iterator[dict[str, Any]]:
        self._buf += chunk
        while len(self._buf) >= HEADER.size:
            (length,) = HEADER.unpack_from(self._buf)
            if length > MAX_FRAME:
                raise FrameError("oversize")
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            body = bytes(self._buf[HEADER.size:end])
            del self._buf[:end]
            yield _decode_body(body)

    @property
    def pending(self) -> int:
        return len(self._buf)


async def read_payload(reader: asyncio.StreamReader) -> dict[str, Any] | None:
    """Read one frame; None on clean EOF between frames."""
    try:
        header = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise FrameError("truncated header") from None
        return None
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME:
        raise FrameError("oversize")
    try:
        body = await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise FrameError("truncated body") from None
    return _decode_body(body)


async def request(addr: str, payload: Mapping[str, Any], timeout: float = 5.0) -> dict[str, Any]:
    """One-shot request/reply exchange over a fresh connection."""
    host, port = split_addr(addr)
    reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    try:
        writer.write(encode_payload(payload))
        await writer.drain()
        reply = await asyncio.wait_for(read_payload(reader), timeout)
        if reply is None:
            raise ConnectionError(f"{addr} closed the connection without replying")
        return reply
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except (ConnectionError, OSError):
            pass


def backoff_delays(base: float = 0.1, cap: float = 5.0) -> Iterator[float]:
    """Exponential retry delays in seconds: base, 2*base, ... capped at ``cap``."""
    delay = base
    while True:
        yield delay
        delay = min(cap, delay * 2)
