"""Physical-sensor adapters producing a uniform stream of samples.

Each adapter is opened once, iterated as an async stream of
:class:`~vsm.wire.Message` (``values == {"value": x}``), and closed by its
owning virtual sensor.
"""
from __future__ import annotations

import asyncio
import errno
import json
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, AsyncIterator, Iterator, Mapping

from .config import AdapterSpec
from .wire import Message, now_ms, split_addr

log = logging.getLogger(__name__)

DEFAULT_PERIOD = 100


class AdapterError(Exception):
    pass


class BindError(AdapterError):
    pass


class FileError(AdapterError):
    pass


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class SensorSample:
    sensor_id: str
    ts: int
    value: float


def parse_line(line: str) -> float:
    text = line.strip()
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"not a finite number: {text!r}")
    return value


def waveform_values(params: Mapping[str, Any]) -> Iterator[float]:
    """Infinite, seed-deterministic value sequence of a sim adapter."""
    kind = params.get("waveform", "constant")
    amp = params.get("amplitude", 1.0)
    period = params.get("period", DEFAULT_PERIOD)
    rng = random.Random(params.get("seed", 0))
    k = 0
    while True:
        if kind == "constant":
            yield amp
        elif kind == "ramp":
            yield amp * (k % period) / period
        elif kind == "sine":
            yield amp * math.sin(2 * math.pi * k / period)
        elif kind == "random_uniform":
            yield rng.uniform(0.0, amp)
        else:
            raise ValueError(f"unknown waveform {kind!r}")
        k += 1


class Adapter:
    kind = ""

    def __init__(self, spec: AdapterSpec, sensor_id: str) -> None:
        self.spec = spec
        self.params = dict(spec.params)
        self.sensor_id = sensor_id
        self.seq = 0
        self.parse_errors = 0
        self._last_ts = 0
        self._closed = False

    async def open(self) -> "Adapter":
        return self

    async def samples(self) -> AsyncIterator[SensorSample]:
        raise NotImplementedError
        yield  # pragma: no cover

    def _stamp(self, ts: int | None = None) -> int:
        ts = now_ms() if ts is None else ts
        self._last_ts = max(self._last_ts, ts)
        return self._last_ts

    async def messages(self) -> AsyncIterator[Message]:
        async for sample in self.samples():
            msg = Message(self.sensor_id, self.seq, sample.ts, {"value": sample.value})
            self.seq += 1
            yield msg

    def __aiter__(self) -> AsyncIterator[Message]:
        return self.messages()

    async def close(self) -> None:
        self._closed = True


class SimAdapter(Adapter):
    kind = "sim"

    async def samples(self) -> AsyncIterator[SensorSample]:
        loop = asyncio.get_running_loop()
        rate = self.params["rate_ms"] / 1000.0
        start = loop.time()
        for k, value in enumerate(waveform_values(self.params), start=1):
            delay = start + k * rate - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            if self._closed:
                return
            yield SensorSample(self.sensor_id, self._stamp(), value)


class TcpLineAdapter(Adapter):
    """Listens on ``listen_addr`` for newline-delimited decimal numbers."""

    kind = "tcp_line"

    def __init__(self, spec: AdapterSpec, sensor_id: str) -> None:
        super().__init__(spec, sensor_id)
        self._queue: asyncio.Queue[SensorSample | None] = asyncio.Queue()
        self._server: asyncio.base_events.Server | None = None
        self.address: str | None = None

    async def open(self) -> "TcpLineAdapter":
        host, port = split_addr(self.params["listen_addr"])
        try:
            self._server = await asyncio.start_server(self._on_connect, host, port)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise BindError(f"{self.params['listen_addr']} already in use") from exc
            raise BindError(str(exc)) from exc
        self.address = f"{host}:{self._server.sockets[0].getsockname()[1]}"
        return self

    async def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while not self._closed:
                line = await reader.readline()
                if not line:
                    break
                try:
                    value = parse_line(line.decode("ascii", errors="replace"))
                except ParseError as exc:
                    self.parse_errors += 1
                    log.debug("%s: %s", self.sensor_id, exc)
                    continue
                await self._queue.put(SensorSample(self.sensor_id, self._stamp(), value))
        except (ConnectionError, OSError):
            pass
        finally:
            writer.close()

    async def samples(self) -> AsyncIterator[SensorSample]:
        while True:
            sample = await self._queue.get()
            if sample is None:
                return
            yield sample

    async def close(self) -> None:
        await super().close()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None
        self._queue.put_nowait(None)


class FileReplayAdapter(Adapter):
    """Replays the ``value`` field of a persistence log, gaps scaled by 1/speedup."""

    kind = "file_replay"

    async def open(self) -> "FileReplayAdapter":
        path = Path(self.params["path"])
        if not path.is_file():
            raise FileError(f"replay file {path} not found")
        return self

    def _records(self) -> Iterator[tuple[int, float]]:
        with open(self.params["path"], encoding="utf-8") as fh:
            for line in fh:
                try:
                    rec = json.loads(line)
                    ts = int(rec["ts_published"])
                    value = rec["values"]["value"]
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    self.parse_errors += 1
                    continue
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    self.parse_errors += 1
                    continue
                yield ts, value

    async def samples(self) -> AsyncIterator[SensorSample]:
        speedup = float(self.params.get("speedup", 1.0))
        prev_ts: int | None = None
        for ts, value in self._records():
            if prev_ts is not None and ts > prev_ts:
                await asyncio.sleep((ts - prev_ts) / 1000.0 / speedup)
            prev_ts = ts if prev_ts is None else max(prev_ts, ts)
            if self._closed:
                return
            yield SensorSample(self.sensor_id, self._stamp(), value)


_KINDS: dict[str, type[Adapter]] = {
    "sim": SimAdapter,
    "tcp_line": TcpLineAdapter,
    "file_replay": FileReplayAdapter,
}


async def adapter_open(spec: AdapterSpec, sensor_id: str) -> Adapter:
    """Create and open an adapter; iterate the result for Messages."""
    try:
        cls = _KINDS[spec.kind]
    except KeyError:
        raise AdapterError(f"unknown adapter kind {spec.kind!r}") from None
    return await cls(spec, sensor_id).open()
