"""Scenario descriptions and the VS topologies generated from them."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from ..config import FaultPolicy, InputSpec, MonitorSpec, ProcessorSpec, VSConfig
from ..control import DeploymentTarget

SCENARIOS = ("vs_count", "inputs_per_vs", "levels", "multi_node")


class ShapeError(ValueError):
    pass


@dataclass
class ScenarioSpec:
    scenario: str
    total_vs: int = 0  # 0: derived from levels
    inputs_per_vs: int = 1
    levels: list[int] = field(default_factory=list)
    nodes: list[DeploymentTarget] = field(default_factory=list)
    sensor_rate_ms: int = 100
    duration_s: int = 60
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ShapeError(f"unknown scenario {self.scenario!r}")
        if not self.levels:
            self.levels = [self.total_vs or 1]
        if not self.total_vs:
            self.total_vs = sum(self.levels)
        if sum(self.levels) != self.total_vs:
            raise ShapeError(f"levels {self.levels} do not sum to total_vs={self.total_vs}")
        for name in ("total_vs", "inputs_per_vs", "sensor_rate_ms", "duration_s"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive")
        if any(n < 1 for n in self.levels):
            raise ShapeError("every level needs at least one VS")
        if self.seed < 0:
            raise ShapeError("seed must be non-negative")

    @property
    def label(self) -> str:
        if self.scenario == "vs_count":
            return f"vs={self.total_vs}"
        if self.scenario == "inputs_per_vs":
            return f"inputs={self.inputs_per_vs}"
        levels = "/".join(map(str, self.levels))
        return f"levels={levels} nodes={max(1, len(self.nodes))}"

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ScenarioSpec":
        d = dict(d)
        d["nodes"] = [n if isinstance(n, DeploymentTarget) else DeploymentTarget(**n)
                      for n in d.get("nodes", [])]
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario, "total_vs": self.total_vs,
            "inputs_per_vs": self.inputs_per_vs, "levels": list(self.levels),
            "nodes": [{"node": n.node, "control_addr": n.control_addr, "broker_addr": n.broker_addr}
                      for n in self.nodes],
            "sensor_rate_ms": self.sensor_rate_ms, "duration_s": self.duration_s, "seed": self.seed,
        }


@dataclass
class Topology:
    configs: list[VSConfig]
    sensors: list[str]           # level-1 sensor ids (= broker topics)
    sensor_nodes: dict[str, str]  # sensor id -> node hosting the level-1 broker
    levels: list[list[str]]       # VS ids per level
    placement: dict[str, str]     # VS id -> node

    def configs_for(self, node: str) -> list[VSConfig]:
        return [c for c in self.configs if self.placement[c.id] == node]


def _level_nodes(spec: ScenarioSpec) -> list[DeploymentTarget]:
    if not spec.nodes:
        raise ShapeError("at least one deployment target is required")
    for n in spec.nodes:
        if n.broker_addr is None:
            raise ShapeError(f"node {n.node} has no broker_addr")
    if spec.scenario == "multi_node":
        if len(spec.nodes) != len(spec.levels):
            raise ShapeError(f"{len(spec.levels)} levels but {len(spec.nodes)} nodes")
        return list(spec.nodes)
    return [spec.nodes[0]] * len(spec.levels)


def generate_topology(spec: ScenarioSpec, monitor_endpoint: str = "127.0.0.1:7900",
                      monitor_interval_ms: int = 5000) -> Topology:
    """Build the VS tree for a scenario.

    Level 1 reads simulated sensor topics; each VS at level k averages a
    round-robin share of level k-1, so every upstream VS feeds exactly one
    downstream VS.
    """
    nodes = _level_nodes(spec)
    levels = spec.levels
    for k in range(1, len(levels)):
        if levels[k - 1] % levels[k]:
            raise ShapeError(f"level {k} has {levels[k-1]} VSs, not divisible by {levels[k]}")

    fan_in_l1 = spec.inputs_per_vs if spec.scenario == "inputs_per_vs" else 1
    width = len(str(max(levels[0] * fan_in_l1, max(levels))))
    configs: list[VSConfig] = []
    sensors: list[str] = []
    sensor_nodes: dict[str, str] = {}
    level_ids: list[list[str]] = []
    placement: dict[str, str] = {}

    def make(vs_id: str, node: DeploymentTarget, inputs: list[InputSpec]) -> VSConfig:
        return VSConfig(
            id=vs_id, node=node.node, inputs=tuple(inputs), read_rate_ms=spec.sensor_rate_ms,
            fault_policy=FaultPolicy("proceed"), processor=ProcessorSpec("mean"),
            monitor=MonitorSpec(monitor_interval_ms, monitor_endpoint),
        )

    l1_node = nodes[0]
    ids = []
    for i in range(levels[0]):
        inputs = []
        for j in range(fan_in_l1):
            sid = f"s{i * fan_in_l1 + j + 1:0{width}d}"
            sensors.append(sid)
            sensor_nodes[sid] = l1_node.node
            inputs.append(InputSpec("virtual", sid, broker_addr=l1_node.broker_addr))
        vs_id = f"L1-{i + 1:0{width}d}"
        configs.append(make(vs_id, l1_node, inputs))
        placement[vs_id] = l1_node.node
        ids.append(vs_id)
    level_ids.append(ids)

    for k in range(1, len(levels)):
        node, up_node = nodes[k], nodes[k - 1]
        upstream = level_ids[-1]
        groups: list[list[str]] = [[] for _ in range(levels[k])]
        for j, up in enumerate(upstream):
            groups[j % levels[k]].append(up)
        ids = []
        for i, group in enumerate(groups):
            vs_id = f"L{k + 1}-{i + 1:0{width}d}"
            inputs = [InputSpec("virtual", up, broker_addr=up_node.broker_addr) for up in group]
            configs.append(make(vs_id, node, inputs))
            placement[vs_id] = node.node
            ids.append(vs_id)
        level_ids.append(ids)

    return Topology(configs, sensors, sensor_nodes, level_ids, placement)


def load_specs(path: str) -> list[ScenarioSpec]:
    """A spec file holds one ScenarioSpec object or ``{"runs": [...]}``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    runs = doc["runs"] if isinstance(doc, dict) and "runs" in doc else [doc]
    return [ScenarioSpec.from_dict(r) for r in runs]
