"""Cloud-side configurator and deployer."""
from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass
from typing import Any, Mapping

from .config import ConfigError, config_from_dict, parse_config, serialize_config, validate_config
from .wire import request, split_addr

log = logging.getLogger(__name__)

DEPLOY_ATTEMPTS = 3
DEPLOY_SPACING_S = 1.0


class ValidationFailure(ValueError):
    def __init__(self, violations: list[str]) -> None:
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class RemoteValidationFailure(ValidationFailure):
    pass


@dataclass(frozen=True)
class DeploymentTarget:
    node: str
    control_addr: str
    broker_addr: str | None = None

    def __post_init__(self) -> None:
        split_addr(self.control_addr)
        if self.broker_addr is not None:
            split_addr(self.broker_addr)

    @classmethod
    def parse(cls, text: str) -> "DeploymentTarget":
        """``host:port`` or ``node=host:port``."""
        node, sep, addr = text.partition("=")
        if not sep:
            node, addr = text, text
        return cls(node, addr)


def configure(doc: Mapping[str, Any], existing_ids: set[str] | frozenset[str] = frozenset()) -> bytes:
    """Validate a config description and return the canonical file bytes."""
    try:
        cfg = config_from_dict(dict(doc))
    except ConfigError as exc:
        raise ValidationFailure([str(exc)]) from exc
    violations = validate_config(cfg, existing_ids)
    if violations:
        raise ValidationFailure(violations)
    data = serialize_config(cfg)
    if parse_config(data) != cfg:  # pragma: no cover - guarded by round-trip tests
        raise ValidationFailure(["serialization round-trip mismatch"])
    return data


def _parse_kv(items: list[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValidationFailure([f"expected key=value, got {item!r}"])
        out[key] = _scalar(raw)
    return out


def _scalar(raw: str) -> Any:
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    if raw in ("true", "false"):
        return raw == "true"
    return raw


def parse_input_arg(text: str) -> dict[str, Any]:
    """``virtual:<source>@<host:port>`` or ``physical:<sensor>:<adapter>[:k=v,...]``."""
    kind, _, rest = text.partition(":")
    if kind == "virtual":
        source, sep, addr = rest.partition("@")
        if not sep:
            raise ValidationFailure([f"virtual input needs source@host:port: {text!r}"])
        return {"kind": "virtual", "source_id": source, "broker_addr": addr}
    if kind == "physical":
        sensor, _, spec = rest.partition(":")
        adapter, _, params = spec.partition(":")
        return {"kind": "physical", "source_id": sensor,
                "adapter": {"kind": adapter, "params": _parse_kv(params.split(",") if params else [])}}
    raise ValidationFailure([f"input kind must be virtual or physical: {text!r}"])


def parse_fault_arg(text: str) -> dict[str, Any]:
    kind, _, n = text.partition(":")
    if kind == "wait":
        if not n.isdigit():
            raise ValidationFailure(["wait policy needs max_wait_ticks, e.g. wait:3"])
        return {"kind": "wait", "max_wait_ticks": int(n)}
    return {"kind": kind}


def doc_from_args(args: Any) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "id": args.id,
        "node": args.node,
        "inputs": [parse_input_arg(s) for s in args.input or []],
        "read_rate_ms": args.read_rate_ms,
        "fault_policy": parse_fault_arg(args.fault),
        "processor": {"fn": args.processor, "field": args.field,
                      "params": _parse_kv(args.param or [])},
        "monitor": {"interval_ms": args.monitor_interval, "endpoint": args.monitor_endpoint},
    }
    if args.output_topic:
        doc["output_topic"] = args.output_topic
    if args.storage:
        doc["storage"] = {"enabled": True, "path": args.storage}
    return doc


async def deploy_async(target: DeploymentTarget, content: bytes, filename: str,
                       attempts: int = DEPLOY_ATTEMPTS, spacing_s: float = DEPLOY_SPACING_S,
                       timeout: float = 5.0) -> dict[str, Any]:
    """Send a deploy_config frame; retry transport failures, never validation failures."""
    payload = {"cmd": "deploy_config", "filename": filename, "content": content.decode("utf-8")}
    last: Exception | None = None
    for attempt in range(attempts):
        if attempt:
            await asyncio.sleep(spacing_s)
        try:
            reply = await request(target.control_addr, payload, timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            last = exc
            log.warning("deploy %s to %s failed (attempt %d/%d): %s",
                        filename, target.control_addr, attempt + 1, attempts, exc)
            continue
        if reply.get("ok"):
            return reply
        raise RemoteValidationFailure(reply.get("violations") or [reply.get("error", "rejected")])
    raise ConnectionError(f"could not reach {target.control_addr} after {attempts} attempts: {last}")


def deploy(target: DeploymentTarget, content: bytes, filename: str, **kw: Any) -> dict[str, Any]:
    return asyncio.run(deploy_async(target, content, filename, **kw))


async def control_call(addr: str, payload: dict[str, Any], timeout: float = 5.0) -> dict[str, Any]:
    return await request(addr, payload, timeout)


async def wait_for_live(addr: str, ids: set[str], timeout: float) -> set[str]:
    """Poll ``list_vs`` until every id in ``ids`` is live; returns the live set."""
    deadline = time.monotonic() + timeout
    live: set[str] = set()
    while time.monotonic() < deadline:
        try:
            reply = await request(addr, {"cmd": "list_vs"})
            live = {v["id"] for v in reply.get("vs", [])}
            if ids <= live:
                return live
        except (OSError, asyncio.TimeoutError):
            pass
        await asyncio.sleep(0.1)
    return live

