"""Runs benchmark scenarios against real node-agent processes on this host."""
from __future__ import annotations

import asyncio
import json
import logging
import os
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..config import serialize_config
from ..control import DeploymentTarget, deploy_async, wait_for_live
from ..monitor import MonitorServer
from .loadgen import LoadStats, run_loadgen
from .sampler import ResourceSample, sample_resources
from .stats import SummaryRow, summarize
from .topology import ScenarioSpec, Topology, generate_topology

log = logging.getLogger(__name__)

WARMUP_S = 3.0
READY_TIMEOUT_S = 20.0


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def local_targets(n: int, host: str = "127.0.0.1") -> list[DeploymentTarget]:
    return [DeploymentTarget(f"fog{i + 1}", f"{host}:{free_port(host)}", f"{host}:{free_port(host)}")
            for i in range(n)]


class NodeProcess:
    """A ``vsm.agent`` child process serving one node."""

    def __init__(self, target: DeploymentTarget, kb_dir: Path, poll_ms: int = 1000,
                 log_level: str = "WARNING") -> None:
        assert target.broker_addr is not None
        self.target = target
        self.kb_dir = kb_dir
        self.poll_ms = poll_ms
        self.log_level = log_level
        self.proc: subprocess.Popen | None = None
        self.ready: dict | None = None

    @property
    def pid(self) -> int:
        assert self.proc is not None
        return self.proc.pid

    def start(self) -> "NodeProcess":
        self.kb_dir.mkdir(parents=True, exist_ok=True)
        cmd = [sys.executable, "-m", "vsm.agent", "--node", self.target.node,
               "--kb-dir", str(self.kb_dir), "--broker-addr", self.target.broker_addr or "",
               "--control-addr", self.target.control_addr, "--poll-ms", str(self.poll_ms),
               "--log-level", self.log_level]
        self.proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, text=True)
        assert self.proc.stdout is not None
        deadline = time.monotonic() + READY_TIMEOUT_S
        while time.monotonic() < deadline:
            line = self.proc.stdout.readline()
            if not line:
                break
            try:
                doc = json.loads(line)
            except json.JSONDecodeError:
                continue
            if doc.get("event") == "ready":
                self.ready = doc
                return self
        self.stop()
        raise RuntimeError(f"node {self.target.node} did not become ready")

    def stop(self, timeout: float = 10.0) -> None:
        if self.proc is None or self.proc.poll() is not None:
            return
        self.proc.terminate()
        try:
            self.proc.wait(timeout)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()

    def __enter__(self) -> "NodeProcess":
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    samples: list[ResourceSample]
    load: LoadStats
    topology: Topology
    rows: dict[str, dict[str, SummaryRow]] = field(default_factory=dict)  # node -> metric -> row

    def row(self, node: str, metric: str) -> SummaryRow:
        return self.rows[node][metric]


def summarize_samples(label: str, samples: list[ResourceSample]) -> dict[str, dict[str, SummaryRow]]:
    rows: dict[str, dict[str, SummaryRow]] = {}
    for node in sorted({s.node for s in samples}):
        mine = [s for s in samples if s.node == node]
        rows[node] = {
            "cpu": summarize([s.cpu_percent for s in mine], f"{label} {node} cpu"),
            "memory": summarize([s.mem_bytes for s in mine], f"{label} {node} memory"),
        }
    return rows


async def _run(spec: ScenarioSpec, work: Path, warmup_s: float) -> ScenarioResult:
    monitor = MonitorServer()
    monitor_addr = await monitor.start("127.0.0.1:0")
    topo = generate_topology(spec, monitor_endpoint=monitor_addr)
    nodes = [NodeProcess(t, work / "kb" / t.node) for t in spec.nodes
             if t.node in set(topo.placement.values())]
    try:
        for n in nodes:
            await asyncio.to_thread(n.start)
        # deploy upstream levels first so downstream subscriptions find live topics
        by_node = {n.target.node: n.target for n in nodes}
        for level in topo.levels:
            for vs_id in level:
                cfg = next(c for c in topo.configs if c.id == vs_id)
                await deploy_async(by_node[topo.placement[vs_id]], serialize_config(cfg), f"{vs_id}.json")
        for n in nodes:
            want = {c.id for c in topo.configs_for(n.target.node)}
            live = await wait_for_live(n.target.control_addr, want, timeout=30.0)
            if not want <= live:
                raise RuntimeError(f"{n.target.node}: only {len(live)}/{len(want)} VSs came up")

        brokers = {t.node: t.broker_addr for t in spec.nodes}
        sensors = {sid: brokers[node] for sid, node in topo.sensor_nodes.items()}
        pids = {n.target.node: n.pid for n in nodes}
        load_task = asyncio.create_task(
            run_loadgen(sensors, spec.sensor_rate_ms, warmup_s + spec.duration_s, spec.seed))
        await asyncio.sleep(warmup_s)
        samples = await sample_resources(pids, spec.duration_s)
        load = await load_task
    finally:
        for n in nodes:
            await asyncio.to_thread(n.stop)
        await monitor.close()
    result = ScenarioResult(spec, samples, load, topo)
    result.rows = summarize_samples(spec.label, samples)
    return result


def run_scenario(spec: ScenarioSpec, work_dir: str | os.PathLike, warmup_s: float = WARMUP_S) -> ScenarioResult:
    """Spawn the nodes, deploy the topology, drive load and sample resources."""
    if not spec.nodes:
        count = len(spec.levels) if spec.scenario == "multi_node" else 1
        spec = replace(spec, nodes=local_targets(count))
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    return asyncio.run(_run(spec, work, warmup_s))


def default_sweep(scenario: str, duration_s: int = 60, rate_ms: int = 100, seed: int = 0) -> list[ScenarioSpec]:
    """Desk-scale versions of the four evaluation experiments."""
    common = dict(duration_s=duration_s, sensor_rate_ms=rate_ms, seed=seed)
    if scenario == "vs_count":
        return [ScenarioSpec("vs_count", total_vs=n, **common) for n in (1, 10, 50)]
    if scenario == "inputs_per_vs":
        return [ScenarioSpec("inputs_per_vs", total_vs=1, inputs_per_vs=n, **common) for n in (1, 10, 50)]
    if scenario == "levels":
        return [ScenarioSpec("levels", levels=lv, **common) for lv in ([30], [20, 10], [10, 10, 10])]
    if scenario == "multi_node":
        return [ScenarioSpec("levels", levels=[30], **common),
                ScenarioSpec("multi_node", levels=[10, 10, 10], **common)]
    raise ValueError(f"unknown scenario {scenario!r}")
