"""Virtual-sensor configuration documents: parse, serialize, validate, diff.

A configuration file is one UTF-8 JSON object named ``<id>.json``. It is the
only artifact exchanged between the cloud tools and the fog-node agent.
"""
from __future__ import annotations

import json
import dataclasses
from dataclasses import dataclass, fields, replace
from typing import Any, Mapping

INPUT_KINDS = ("virtual", "physical")
FAULT_KINDS = ("wait", "proceed", "drop")
PROCESSOR_FNS = ("passthrough", "mean", "sum", "min", "max", "count", "last", "threshold")
THRESHOLD_OPS = ("gt", "lt", "ge", "le")
ADAPTER_KINDS = ("sim", "tcp_line", "file_replay")
WAVEFORMS = ("constant", "ramp", "sine", "random_uniform")
MIN_MONITOR_INTERVAL_MS = 100

SCALAR_FIELDS = ("read_rate_ms", "fault_policy", "processor", "storage", "monitor", "output_topic")


class ConfigError(ValueError):
    pass


class ConfigSyntaxError(ConfigError):
    """The document is not a JSON object."""


class SchemaError(ConfigError):
    """A required field is missing or has the wrong type."""

    def __init__(self, field_name: str, detail: str = "") -> None:
        self.field = field_name
        super().__init__(f"{field_name}: {detail}" if detail else field_name)


class IdMismatch(ConfigError):
    pass


@dataclass(frozen=True)
class AdapterSpec:
    kind: str
    params: Mapping[str, Any] = dataclasses.field(default_factory=dict)


@dataclass(frozen=True)
class InputSpec:
    kind: str
    source_id: str
    broker_addr: str | None = None
    adapter: AdapterSpec | None = None


@dataclass(frozen=True)
class FaultPolicy:
    kind: str
    max_wait_ticks: int | None = None


@dataclass(frozen=True)
class ProcessorSpec:
    fn: str
    field: str = "value"
    params: Mapping[str, Any] = dataclasses.field(default_factory=dict)


@dataclass(frozen=True)
class StorageSpec:
    enabled: bool = False
    path: str | None = None


@dataclass(frozen=True)
class MonitorSpec:
    interval_ms: int
    endpoint: str


@dataclass(frozen=True)
class VSConfig:
    id: str
    node: str
    inputs: tuple[InputSpec, ...]
    read_rate_ms: int
    fault_policy: FaultPolicy
    processor: ProcessorSpec
    monitor: MonitorSpec
    storage: StorageSpec = StorageSpec()
    output_topic: str = ""

    def __post_init__(self) -> None:
        if not self.output_topic:
            object.__setattr__(self, "output_topic", self.id)
        object.__setattr__(self, "inputs", tuple(self.inputs))

    @property
    def input_ids(self) -> list[str]:
        return [i.source_id for i in self.inputs]

    def input(self, source_id: str) -> InputSpec | None:
        for spec in self.inputs:
            if spec.source_id == source_id:
                return spec
        return None


@dataclass(frozen=True)
class ConfigDiff:
    added_inputs: tuple[InputSpec, ...] = ()
    removed_inputs: tuple[InputSpec, ...] = ()
    changed_scalars: frozenset[str] = frozenset()

    @property
    def empty(self) -> bool:
        return not (self.added_inputs or self.removed_inputs or self.changed_scalars)


# --- parsing -----------------------------------------------------------------

_TOP_LEVEL = {f.name for f in fields(VSConfig)}
_REQUIRED = ("id", "node", "inputs", "read_rate_ms", "fault_policy", "processor", "monitor")


def _get(doc: Mapping[str, Any], key: str, types: type | tuple[type, ...], where: str = "",
         required: bool = True, default: Any = None) -> Any:
    name = f"{where}.{key}" if where else key
    if key not in doc or doc[key] is None:
        if required:
            raise SchemaError(name, "missing")
        return default
    value = doc[key]
    # bool is an int subclass; never accept it where a number is wanted
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise SchemaError(name, f"expected {_type_name(types)}, got bool")
    if not isinstance(value, types):
        raise SchemaError(name, f"expected {_type_name(types)}, got {type(value).__name__}")
    return value


def _type_name(types: type | tuple[type, ...]) -> str:
    if isinstance(types, tuple):
        return "|".join(t.__name__ for t in types)
    return types.__name__


def _enum(value: str, allowed: tuple[str, ...], name: str) -> str:
    if value not in allowed:
        raise SchemaError(name, f"{value!r} not one of {', '.join(allowed)}")
    return value


def _parse_adapter(doc: Any, where: str) -> AdapterSpec:
    if not isinstance(doc, dict):
        raise SchemaError(where, "expected object")
    kind = _enum(_get(doc, "kind", str, where), ADAPTER_KINDS, f"{where}.kind")
    params = _get(doc, "params", dict, where, required=False, default={})
    return AdapterSpec(kind=kind, params=dict(params))


def _parse_input(doc: Any, idx: int) -> InputSpec:
    where = f"inputs[{idx}]"
    if not isinstance(doc, dict):
        raise SchemaError(where, "expected object")
    kind = _enum(_get(doc, "kind", str, where), INPUT_KINDS, f"{where}.kind")
    source_id = _get(doc, "source_id", str, where)
    if kind == "virtual":
        broker_addr = _get(doc, "broker_addr", str, where)
        if doc.get("adapter") is not None:
            raise SchemaError(f"{where}.adapter", "not allowed for virtual input")
        return InputSpec(kind, source_id, broker_addr=broker_addr)
    if "adapter" not in doc or doc["adapter"] is None:
        raise SchemaError(f"{where}.adapter", "missing")
    adapter = _parse_adapter(doc["adapter"], f"{where}.adapter")
    broker_addr = _get(doc, "broker_addr", str, where, required=False)
    return InputSpec(kind, source_id, broker_addr=broker_addr, adapter=adapter)


def config_from_dict(doc: Any) -> VSConfig:
    """Build a VSConfig from an already-decoded JSON object."""
    if not isinstance(doc, dict):
        raise ConfigSyntaxError("config document must be a JSON object")
    unknown = sorted(set(doc) - _TOP_LEVEL)
    if unknown:
        raise SchemaError(unknown[0], "unknown field")
    for key in _REQUIRED:
        if key not in doc:
            raise SchemaError(key, "missing")

    vs_id = _get(doc, "id", str)
    node = _get(doc, "node", str)
    raw_inputs = _get(doc, "inputs", list)
    inputs = tuple(_parse_input(d, i) for i, d in enumerate(raw_inputs))
    read_rate_ms = _get(doc, "read_rate_ms", int)

    fp = _get(doc, "fault_policy", dict)
    fault_kind = _enum(_get(fp, "kind", str, "fault_policy"), FAULT_KINDS, "fault_policy.kind")
    max_wait = None
    if fault_kind == "wait":
        try:
            max_wait = _get(fp, "max_wait_ticks", int, "fault_policy")
        except SchemaError:
            raise SchemaError("max_wait_ticks", "required when fault_policy.kind is wait") from None
    fault_policy = FaultPolicy(fault_kind, max_wait)

    pd = _get(doc, "processor", dict)
    fn = _enum(_get(pd, "fn", str, "processor"), PROCESSOR_FNS, "processor.fn")
    proc_field = _get(pd, "field", str, "processor", required=False, default="value")
    params = dict(_get(pd, "params", dict, "processor", required=False, default={}))
    if fn == "threshold":
        if "op" not in params:
            raise SchemaError("processor.params.op", "required for threshold")
        if "limit" not in params:
            raise SchemaError("processor.params.limit", "required for threshold")
        _enum(params["op"], THRESHOLD_OPS, "processor.params.op")
        lim = params["limit"]
        if isinstance(lim, bool) or not isinstance(lim, (int, float)):
            raise SchemaError("processor.params.limit", "expected number")
    processor = ProcessorSpec(fn, proc_field, params)

    sd = _get(doc, "storage", dict, required=False, default={"enabled": False})
    enabled = _get(sd, "enabled", bool, "storage")
    path = _get(sd, "path", str, "storage", required=enabled)
    storage = StorageSpec(enabled, path)

    md = _get(doc, "monitor", dict)
    monitor = MonitorSpec(_get(md, "interval_ms", int, "monitor"), _get(md, "endpoint", str, "monitor"))

    output_topic = _get(doc, "output_topic", str, required=False, default="") or vs_id
    return VSConfig(
        id=vs_id, node=node, inputs=inputs, read_rate_ms=read_rate_ms,
        fault_policy=fault_policy, processor=processor, monitor=monitor,
        storage=storage, output_topic=output_topic,
    )


def parse_config(text: bytes | str) -> VSConfig:
    """Parse one configuration document, filling defaults.

    Raises ConfigSyntaxError for malformed JSON and SchemaError (whose
    ``field`` names the offending field) for structural problems.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigSyntaxError(f"not UTF-8: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigSyntaxError(str(exc)) from exc
    return config_from_dict(doc)


def config_to_dict(cfg: VSConfig) -> dict[str, Any]:
    inputs = []
    for spec in cfg.inputs:
        d: dict[str, Any] = {"kind": spec.kind, "source_id": spec.source_id}
        if spec.broker_addr is not None:
            d["broker_addr"] = spec.broker_addr
        if spec.adapter is not None:
            d["adapter"] = {"kind": spec.adapter.kind, "params": dict(spec.adapter.params)}
        inputs.append(d)
    fp: dict[str, Any] = {"kind": cfg.fault_policy.kind}
    if cfg.fault_policy.max_wait_ticks is not None:
        fp["max_wait_ticks"] = cfg.fault_policy.max_wait_ticks
    storage: dict[str, Any] = {"enabled": cfg.storage.enabled}
    if cfg.storage.path is not None:
        storage["path"] = cfg.storage.path
    return {
        "id": cfg.id,
        "node": cfg.node,
        "inputs": inputs,
        "output_topic": cfg.output_topic,
        "read_rate_ms": cfg.read_rate_ms,
        "fault_policy": fp,
        "processor": {"fn": cfg.processor.fn, "field": cfg.processor.field,
                      "params": dict(cfg.processor.params)},
        "storage": storage,
        "monitor": {"interval_ms": cfg.monitor.interval_ms, "endpoint": cfg.monitor.endpoint},
    }


def serialize_config(cfg: VSConfig) -> bytes:
    return (json.dumps(config_to_dict(cfg), indent=2, sort_keys=False) + "\n").encode("utf-8")


# --- validation --------------------------------------------------------------

def _addr_ok(addr: str | None) -> bool:
    if not addr or ":" not in addr:
        return False
    host, _, port = addr.rpartition(":")
    return bool(host) and port.isdigit() and 0 < int(port) < 65536


def _adapter_violations(adapter: AdapterSpec, where: str) -> list[str]:
    p = adapter.params
    out = []

    def positive(key: str, kinds: tuple[type, ...] = (int,)) -> None:
        v = p.get(key)
        if isinstance(v, bool) or not isinstance(v, kinds) or v <= 0:
            out.append(f"{where}.params.{key} must be a positive number")

    if adapter.kind == "sim":
        positive("rate_ms")
        if p.get("waveform") not in WAVEFORMS:
            out.append(f"{where}.params.waveform must be one of {', '.join(WAVEFORMS)}")
        amp = p.get("amplitude")
        if isinstance(amp, bool) or not isinstance(amp, (int, float)):
            out.append(f"{where}.params.amplitude must be a number")
        seed = p.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            out.append(f"{where}.params.seed must be a non-negative integer")
    elif adapter.kind == "tcp_line":
        if not _addr_ok(p.get("listen_addr")):
            out.append(f"{where}.params.listen_addr must be host:port")
    elif adapter.kind == "file_replay":
        if not p.get("path"):
            out.append(f"{where}.params.path missing")
        positive("speedup", (int, float))
    else:
        out.append(f"{where}.kind unknown adapter kind {adapter.kind!r}")
    return out


def validate_config(cfg: VSConfig, existing_ids: set[str] | frozenset[str] = frozenset()) -> list[str]:
    """Return every invariant violation in ``cfg``; an empty list means ok."""
    v: list[str] = []
    if not cfg.id:
        v.append("id must be non-empty")
    if cfg.id in existing_ids:
        v.append("duplicate id")
    if not cfg.node:
        v.append("node must be non-empty")
    if not isinstance(cfg.read_rate_ms, int) or cfg.read_rate_ms < 1:
        v.append("read_rate_ms must be >= 1")

    seen: set[str] = set()
    for i, spec in enumerate(cfg.inputs):
        where = f"inputs[{i}]"
        if spec.source_id in seen:
            v.append(f"duplicate input id {spec.source_id!r}")
        seen.add(spec.source_id)
        if not spec.source_id:
            v.append(f"{where}.source_id must be non-empty")
        if spec.kind == "virtual" and spec.source_id == cfg.id:
            v.append("self-loop")
        if spec.kind == "virtual":
            if not _addr_ok(spec.broker_addr):
                v.append(f"{where}.broker_addr must be host:port")
            if spec.adapter is not None:
                v.append(f"{where}.adapter not allowed for virtual input")
        elif spec.kind == "physical":
            if spec.adapter is None:
                v.append(f"{where}.adapter required for physical input")
            else:
                v.extend(_adapter_violations(spec.adapter, f"{where}.adapter"))
        else:
            v.append(f"{where}.kind must be virtual or physical")

    fp = cfg.fault_policy
    if fp.kind not in FAULT_KINDS:
        v.append(f"fault_policy.kind must be one of {', '.join(FAULT_KINDS)}")
    if fp.kind == "wait" and (not isinstance(fp.max_wait_ticks, int) or fp.max_wait_ticks < 1):
        v.append("fault_policy.max_wait_ticks must be >= 1")

    proc = cfg.processor
    if proc.fn not in PROCESSOR_FNS:
        v.append(f"processor.fn must be one of {', '.join(PROCESSOR_FNS)}")
    if not proc.field:
        v.append("processor.field must be non-empty")
    if proc.fn == "threshold":
        if proc.params.get("op") not in THRESHOLD_OPS:
            v.append("processor.params.op must be one of gt, lt, ge, le")
        lim = proc.params.get("limit")
        if isinstance(lim, bool) or not isinstance(lim, (int, float)):
            v.append("processor.params.limit must be a number")

    if cfg.storage.enabled and not cfg.storage.path:
        v.append("storage.path required when storage is enabled")
    if not isinstance(cfg.monitor.interval_ms, int) or cfg.monitor.interval_ms < MIN_MONITOR_INTERVAL_MS:
        v.append(f"monitor.interval_ms must be >= {MIN_MONITOR_INTERVAL_MS}")
    if not _addr_ok(cfg.monitor.endpoint):
        v.append("monitor.endpoint must be host:port")
    if not cfg.output_topic:
        v.append("output_topic must be non-empty")
    return v


# --- diffing -----------------------------------------------------------------

def diff_config(old: VSConfig, new: VSConfig) -> ConfigDiff:
    if old.id != new.id:
        raise IdMismatch(f"{old.id!r} != {new.id!r}")
    old_ids = set(old.input_ids)
    new_ids = set(new.input_ids)
    added = tuple(i for i in new.inputs if i.source_id not in old_ids)
    removed = tuple(i for i in old.inputs if i.source_id not in new_ids)
    changed = frozenset(name for name in SCALAR_FIELDS if getattr(old, name) != getattr(new, name))
    return ConfigDiff(added, removed, changed)


def with_inputs(cfg: VSConfig, inputs: list[InputSpec]) -> VSConfig:
    return replace(cfg, inputs=tuple(inputs))
