"""Fog-node daemon: knowledge-base watcher, orchestrator, broker and control endpoint."""
from __future__ import annotations

import argparse
import asyncio
import hashlib
import json
import logging
import os
import signal
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .broker import Broker, BrokerServer
from .config import ConfigError, VSConfig, parse_config, validate_config
from .runtime.sensor import BrokerLinks, VirtualSensor
from .wire import FrameError, encode_payload, read_payload, split_addr

log = logging.getLogger(__name__)

POLL_MS = 1000


class ValidationFailure(Exception):
    def __init__(self, violations: list[str]) -> None:
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class UnknownVS(KeyError):
    pass


@dataclass
class ChangeSet:
    created: list[str] = field(default_factory=list)
    modified: list[str] = field(default_factory=list)
    removed: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.created or self.modified or self.removed)


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _valid_filename(name: str) -> bool:
    return (name.endswith(".json") and len(name) > 5 and "/" not in name
            and "\\" not in name and not name.startswith("."))


class KnowledgeBase:
    """A directory of ``<id>.json`` configuration files, polled by content hash."""

    def __init__(self, directory: str | os.PathLike) -> None:
        self.dir = Path(directory)
        self.known: dict[str, str] = {}  # file name -> content hash at last scan

    def read(self, name: str) -> bytes:
        return (self.dir / name).read_bytes()

    def scan(self) -> ChangeSet:
        try:
            names = sorted(p.name for p in self.dir.iterdir() if p.is_file() and _valid_filename(p.name))
        except OSError as exc:
            log.error("knowledge-base %s unreadable: %s", self.dir, exc)
            return ChangeSet()
        current: dict[str, str] = {}
        for name in names:
            try:
                current[name] = content_hash(self.read(name))
            except OSError:
                continue  # vanished between listing and reading
        changes = ChangeSet(
            created=[n for n in current if n not in self.known],
            modified=[n for n in current if n in self.known and self.known[n] != current[n]],
            removed=[n for n in self.known if n not in current],
        )
        self.known = current
        return changes

    def write_atomic(self, name: str, content: bytes) -> None:
        if not _valid_filename(name):
            raise ValueError(f"invalid config file name {name!r}")
        self.dir.mkdir(parents=True, exist_ok=True)
        tmp = self.dir / f".{name}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(content)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.dir / name)


@dataclass
class LiveVS:
    sensor: VirtualSensor
    config_hash: str
    filename: str


class NodeAgent:
    def __init__(self, node: str, kb_dir: str | os.PathLike, broker_addr: str = "127.0.0.1:0",
                 control_addr: str = "127.0.0.1:0", poll_ms: int = POLL_MS) -> None:
        self.node = node
        self.kb = KnowledgeBase(kb_dir)
        self.broker_server = BrokerServer(Broker())
        self.broker_addr = broker_addr
        self.control_addr = control_addr
        self.poll_ms = poll_ms
        self.live: dict[str, LiveVS] = {}
        self.rejected: dict[str, list[str]] = {}
        self.links: BrokerLinks | None = None
        self._control: asyncio.base_events.Server | None = None
        self._scanner: asyncio.Task | None = None
        self._apply_lock = asyncio.Lock()
        self._write_lock = asyncio.Lock()

    @property
    def broker(self) -> Broker:
        return self.broker_server.broker

    async def start(self) -> None:
        self.broker_addr = await self.broker_server.start(self.broker_addr)
        self.links = BrokerLinks(self.broker, self.broker_addr)
        host, port = split_addr(self.control_addr)
        self._control = await asyncio.start_server(self._on_control, host, port)
        self.control_addr = f"{host}:{self._control.sockets[0].getsockname()[1]}"
        await self.scan_once()
        self._scanner = asyncio.create_task(self._scan_loop())
        log.info("node %s up: broker %s control %s kb %s",
                 self.node, self.broker_addr, self.control_addr, self.kb.dir)

    async def stop(self) -> None:
        if self._scanner is not None:
            self._scanner.cancel()
            await asyncio.gather(self._scanner, return_exceptions=True)
        if self._control is not None:
            self._control.close()
            await self._control.wait_closed()
        for vs_id in list(self.live):
            await self._remove(vs_id)
        if self.links is not None:
            await self.links.close()
        await self.broker_server.close()

    # -- knowledge-base polling --------------------------------------------

    async def _scan_loop(self) -> None:
        while True:
            await asyncio.sleep(self.poll_ms / 1000.0)
            try:
                await self.scan_once()
            except Exception:
                log.exception("scan failed")

    async def scan_once(self) -> ChangeSet:
        async with self._apply_lock:
            changes = self.kb.scan()
            stale = [n for n in self.rejected
                     if n not in changes.created + changes.modified + changes.removed]
            for name in changes.removed:
                self.rejected.pop(name, None)
                await self.orchestrate_apply("removed", name, None)
            for name in changes.created + changes.modified:
                self.rejected.pop(name, None)
                await self._apply_file(name, "created" if name in changes.created else "modified")
            if changes:
                # an earlier rejection may have been caused by a file that just changed
                for name in stale:
                    if name in self.kb.known:
                        del self.rejected[name]
                        await self._apply_file(name, "created")
            return changes

    def _vs_for_file(self, name: str) -> str | None:
        for vs_id, entry in self.live.items():
            if entry.filename == name:
                return vs_id
        return None

    async def _apply_file(self, name: str, change: str) -> None:
        try:
            data = self.kb.read(name)
            cfg = parse_config(data)
        except (OSError, ConfigError) as exc:
            self.rejected[name] = [str(exc)]
            log.error("%s rejected: %s", name, exc)
            return
        prev = self._vs_for_file(name)
        if prev is not None and prev != cfg.id:
            await self.orchestrate_apply("removed", name, None)
            change = "created"
        elif prev is None:
            change = "created"
        try:
            await self.orchestrate_apply(change, name, cfg, content_hash(data))
        except ValidationFailure as exc:
            self.rejected[name] = exc.violations
            log.error("%s rejected: %s", name, exc)
        except Exception as exc:  # adapter bind/file errors and the like
            self.rejected[name] = [f"{type(exc).__name__}: {exc}"]
            log.exception("%s failed to start", name)

    def existing_ids(self, exclude_file: str) -> set[str]:
        return {vs_id for vs_id, e in self.live.items() if e.filename != exclude_file}

    async def orchestrate_apply(self, change: str, filename: str, cfg: VSConfig | None,
                                config_hash: str = "") -> None:
        """Instantiate, update in place, or tear down the VS behind ``filename``."""
        if change == "removed":
            vs_id = self._vs_for_file(filename)
            if vs_id is not None:
                await self._remove(vs_id)
            return
        assert cfg is not None and self.links is not None
        violations = validate_config(cfg, self.existing_ids(filename))
        if violations:
            raise ValidationFailure(violations)
        entry = self.live.get(cfg.id)
        if entry is None:
            sensor = VirtualSensor(cfg, self.links)
            try:
                await sensor.start()
            except Exception:
                await sensor.stop()
                raise
            self.live[cfg.id] = LiveVS(sensor, config_hash, filename)
            log.info("instantiated %s", cfg.id)
        elif entry.config_hash != config_hash:
            await entry.sensor.reconfigure(cfg)
            entry.config_hash = config_hash
            log.info("updated %s", cfg.id)

    async def _remove(self, vs_id: str) -> None:
        entry = self.live.pop(vs_id)
        await entry.sensor.stop()
        log.info("removed %s", vs_id)

    # -- control endpoint -------------------------------------------------

    async def _on_control(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                try:
                    req = await read_payload(reader)
                except FrameError as exc:
                    writer.write(encode_payload({"ok": False, "error": "FrameError", "reason": str(exc)}))
                    break
                if req is None:
                    break
                reply = await self.handle_control_command(req)
                writer.write(encode_payload(reply))
                await writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            writer.close()

    async def handle_control_command(self, req: dict[str, Any]) -> dict[str, Any]:
        cmd = req.get("cmd")
        if cmd == "deploy_config":
            return await self._deploy(req)
        if cmd == "list_vs":
            return {"ok": True, "node": self.node,
                    "vs": [{"id": vs_id, "counters": e.sensor.counters()}
                           for vs_id, e in sorted(self.live.items())]}
        if cmd == "vs_status":
            entry = self.live.get(req.get("id", ""))
            if entry is None:
                return {"ok": False, "error": "UnknownVS", "id": req.get("id")}
            return {"ok": True, "id": entry.sensor.id, "counters": entry.sensor.counters(),
                    "config_hash": entry.config_hash, "subscriptions": entry.sensor.subscriptions()}
        if cmd == "broker_stats":
            return {"ok": True, **self.broker.stats(),
                    "subscription_list": [list(s) for s in self.broker.subscriptions()]}
        return {"ok": False, "error": "UnknownCommand", "reason": f"unknown command {cmd!r}"}

    async def _deploy(self, req: dict[str, Any]) -> dict[str, Any]:
        filename = req.get("filename")
        content = req.get("content")
        if not isinstance(filename, str) or not _valid_filename(filename):
            return {"ok": False, "error": "ValidationFailure",
                    "violations": [f"invalid file name {filename!r}"]}
        if not isinstance(content, str):
            return {"ok": False, "error": "ValidationFailure", "violations": ["content missing"]}
        async with self._write_lock:
            try:
                cfg = parse_config(content.encode("utf-8"))
            except ConfigError as exc:
                return {"ok": False, "error": "ValidationFailure", "violations": [str(exc)]}
            existing = self.existing_ids(filename) | self._pending_ids(filename)
            violations = validate_config(cfg, existing)
            if violations:
                return {"ok": False, "error": "ValidationFailure", "violations": violations}
            self.kb.write_atomic(filename, content.encode("utf-8"))
        return {"ok": True, "filename": filename, "id": cfg.id}

    def _pending_ids(self, exclude_file: str) -> set[str]:
        """Ids of knowledge-base files written but not yet instantiated."""
        ids = set()
        for path in self.kb.dir.glob("*.json"):
            if path.name == exclude_file or self._vs_for_file(path.name) is not None:
                continue
            try:
                ids.add(json.loads(path.read_bytes())["id"])
            except (OSError, ValueError, KeyError, TypeError):
                continue
        return ids


async def run_agent(args: argparse.Namespace) -> None:
    agent = NodeAgent(args.node, args.kb_dir, args.broker_addr, args.control_addr, args.poll_ms)
    await agent.start()
    print(json.dumps({"event": "ready", "node": agent.node, "broker": agent.broker_addr,
                      "control": agent.control_addr, "pid": os.getpid()}), flush=True)
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    await stop.wait()
    await agent.stop()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vsm-node", description="Run a fog-node agent.")
    p.add_argument("--node", default=os.environ.get("VSM_NODE", "fog1"), help="node identifier")
    p.add_argument("--kb-dir", required=True, help="knowledge-base directory")
    p.add_argument("--broker-addr", default=os.environ.get("VSM_BROKER_ADDR", "127.0.0.1:5672"))
    p.add_argument("--control-addr", default=os.environ.get("VSM_CONTROL_ADDR", "127.0.0.1:7000"))
    p.add_argument("--poll-ms", type=int, default=POLL_MS)
    p.add_argument("--log-level", default="INFO")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    Path(args.kb_dir).mkdir(parents=True, exist_ok=True)
    asyncio.run(run_agent(args))
    return 0


if __name__ == "__main__":
    sys.exit(main())
