"""Cloud-side liveness monitor fed by virtual-sensor heartbeats."""
from __future__ import annotations

import asyncio
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .wire import FrameError, encode_payload, now_ms, read_payload, split_addr

log = logging.getLogger(__name__)

SWEEP_MS = 1000
GRACE_FACTOR = 2
DEFAULT_INTERVAL_MS = 1000


class UnknownNode(KeyError):
    pass


@dataclass
class VSHealthRecord:
    vs_id: str
    node: str
    expected_interval_ms: int
    last_heartbeat_ts: int | None = None
    status: str = "unknown"
    counters: dict[str, int] = field(default_factory=dict)


@dataclass
class Transition:
    vs_id: str
    old: str
    new: str
    ts: int


class HealthTable:
    def __init__(self) -> None:
        self.records: dict[str, VSHealthRecord] = {}
        self.malformed = 0

    def register(self, vs_id: str, node: str, interval_ms: int = DEFAULT_INTERVAL_MS) -> VSHealthRecord:
        rec = self.records.get(vs_id)
        if rec is None:
            rec = self.records[vs_id] = VSHealthRecord(vs_id, node, interval_ms)
        return rec

    def ingest(self, frame: Any) -> VSHealthRecord | None:
        """Upsert from one heartbeat frame; malformed frames are counted and dropped."""
        try:
            vs_id, node, ts = frame["vs_id"], frame["node"], frame["ts"]
            counters = frame.get("counters", {})
            interval = frame.get("interval_ms", DEFAULT_INTERVAL_MS)
            if not (isinstance(vs_id, str) and vs_id and isinstance(node, str)
                    and isinstance(ts, int) and not isinstance(ts, bool)
                    and isinstance(counters, dict)
                    and isinstance(interval, int) and interval > 0):
                raise TypeError("mistyped heartbeat")
        except (KeyError, TypeError, AttributeError):
            self.malformed += 1
            return None
        rec = self.register(vs_id, node, interval)
        rec.node = node
        rec.expected_interval_ms = interval
        if rec.last_heartbeat_ts is None or ts >= rec.last_heartbeat_ts:
            rec.last_heartbeat_ts = ts
            rec.counters = dict(counters)
        rec.status = "online"
        return rec

    def sweep(self, now: int) -> list[Transition]:
        out = []
        for rec in self.records.values():
            if rec.status != "online" or rec.last_heartbeat_ts is None:
                continue
            if now - rec.last_heartbeat_ts > GRACE_FACTOR * rec.expected_interval_ms:
                rec.status = "offline"
                out.append(Transition(rec.vs_id, "online", "offline", now))
        return out

    def for_node(self, node: str) -> list[VSHealthRecord]:
        return [r for r in self.records.values() if r.node == node]

    def infer_node_offline(self, node: str) -> bool:
        recs = self.for_node(node)
        if not recs:
            raise UnknownNode(node)
        return all(r.status == "offline" for r in recs)

    def nodes(self) -> list[str]:
        return sorted({r.node for r in self.records.values()})

    def to_json(self) -> dict[str, Any]:
        return {"records": [asdict(r) for r in sorted(self.records.values(), key=lambda r: r.vs_id)]}

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "HealthTable":
        table = cls()
        for d in doc.get("records", []):
            rec = VSHealthRecord(**d)
            # liveness is not trusted across restarts; wait for the next heartbeat
            rec.status = "unknown" if rec.last_heartbeat_ts is None else "offline"
            table.records[rec.vs_id] = rec
        return table


class MonitorServer:
    """Accepts heartbeat frames and answers ``status`` queries.

    A query frame ``{cmd: "status", node?}`` is answered with
    ``{ok, records, nodes}`` where ``nodes`` maps node id to the
    node-offline inference.
    """

    def __init__(self, table: HealthTable | None = None, sweep_ms: int = SWEEP_MS,
                 snapshot_path: str | os.PathLike | None = None, snapshot_every_ms: int = 5000) -> None:
        self.table = table or HealthTable()
        self.sweep_ms = sweep_ms
        self.snapshot_path = Path(snapshot_path) if snapshot_path else None
        self.snapshot_every_ms = snapshot_every_ms
        self.transitions: list[Transition] = []
        self.address: str | None = None
        self._server: asyncio.base_events.Server | None = None
        self._tasks: list[asyncio.Task] = []

    async def start(self, addr: str) -> str:
        host, port = split_addr(addr)
        self._server = await asyncio.start_server(self._on_connect, host, port)
        self.address = f"{host}:{self._server.sockets[0].getsockname()[1]}"
        self._tasks.append(asyncio.create_task(self._sweep_loop()))
        if self.snapshot_path is not None:
            self._tasks.append(asyncio.create_task(self._snapshot_loop()))
        return self.address

    async def close(self) -> None:
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self.snapshot_path is not None:
            self.write_snapshot()

    def sweep(self, now: int | None = None) -> list[Transition]:
        found = self.table.sweep(now_ms() if now is None else now)
        for t in found:
            log.warning("%s went offline", t.vs_id)
        self.transitions.extend(found)
        return found

    async def _sweep_loop(self) -> None:
        while True:
            await asyncio.sleep(self.sweep_ms / 1000.0)
            self.sweep()

    def write_snapshot(self) -> None:
        assert self.snapshot_path is not None
        tmp = self.snapshot_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.table.to_json(), indent=1))
        os.replace(tmp, self.snapshot_path)

    async def _snapshot_loop(self) -> None:
        while True:
            await asyncio.sleep(self.snapshot_every_ms / 1000.0)
            try:
                self.write_snapshot()
            except OSError as exc:
                log.error("snapshot failed: %s", exc)

    def status(self, node: str | None = None) -> dict[str, Any]:
        recs = [asdict(r) for r in sorted(self.table.records.values(), key=lambda r: (r.node, r.vs_id))
                if node is None or r.node == node]
        nodes = {n: self.table.infer_node_offline(n) for n in self.table.nodes()
                 if node is None or n == node}
        return {"ok": True, "records": recs, "nodes": nodes}

    async def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                try:
                    frame = await read_payload(reader)
                except FrameError:
                    self.table.malformed += 1
                    break
                if frame is None:
                    break
                cmd = frame.get("cmd")
                if cmd == "heartbeat":
                    prev = self.table.records.get(frame.get("vs_id", ""))
                    was = prev.status if prev else "unknown"
                    rec = self.table.ingest(frame)
                    if rec is not None and was != "online":
                        self.transitions.append(Transition(rec.vs_id, was, "online", now_ms()))
                elif cmd == "status":
                    writer.write(encode_payload(self.status(frame.get("node"))))
                    await writer.drain()
                else:
                    self.table.malformed += 1
        except (ConnectionError, OSError):
            pass
        finally:
            writer.close()
