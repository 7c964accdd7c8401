"""Append-only JSON-lines log of a virtual sensor's output messages."""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path

from .wire import FrameError, Message

log = logging.getLogger(__name__)


class StorageError(OSError):
    pass


def log_path(storage_dir: str | os.PathLike, vs_id: str) -> Path:
    return Path(storage_dir) / f"{vs_id}.log"


def persist(path: str | os.PathLike, msg: Message) -> None:
    """Append one message as a JSON line and flush it."""
    line = json.dumps(msg.to_dict(), separators=(",", ":")) + "\n"
    try:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
    except OSError as exc:
        raise StorageError(f"cannot append to {path}: {exc}") from exc


def read_range(path: str | os.PathLike, t0: int, t1: int) -> tuple[list[Message], int]:
    """Messages with ``t0 <= ts_published <= t1`` in file order, plus the count
    of lines that could not be decoded (e.g. a torn final write)."""
    if t0 > t1:
        raise ValueError("t0 must be <= t1")
    out: list[Message] = []
    skipped = 0
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        return [], 0
    with fh:
        for line in fh:
            if not line.endswith("\n"):
                skipped += 1
                continue
            try:
                msg = Message.from_dict(json.loads(line))
            except (json.JSONDecodeError, FrameError):
                skipped += 1
                continue
            if t0 <= msg.ts_published <= t1:
                out.append(msg)
    if skipped:
        log.warning("%s: skipped %d undecodable line(s)", path, skipped)
    return out, skipped


class DataManager:
    """Keeps one log file open for a VS; errors are counted, never raised."""

    def __init__(self, storage_dir: str | os.PathLike, vs_id: str) -> None:
        self.path = log_path(storage_dir, vs_id)
        self.errors = 0
        self.written = 0
        self._fh = None
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")
        except OSError as exc:
            self.errors += 1
            log.error("storage for %s unavailable: %s", vs_id, exc)

    def persist(self, msg: Message) -> bool:
        if self._fh is None:
            self.errors += 1
            return False
        try:
            self._fh.write(json.dumps(msg.to_dict(), separators=(",", ":")) + "\n")
            self._fh.flush()
        except OSError as exc:
            self.errors += 1
            log.error("persist to %s failed: %s", self.path, exc)
            return False
        self.written += 1
        return True

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
