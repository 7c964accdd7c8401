from __future__ import annotations

import asyncio
import time
from dataclasses import dataclass

import psutil

SAMPLE_INTERVAL_S = 1.0


@dataclass(frozen=True)
class ResourceSample:
    ts: int
    node: str
    cpu_percent: float
    mem_bytes: int


def _cpu_seconds(proc: psutil.Process) -> float:
    t = proc.cpu_times()
    return t.user + t.system


async def sample_resources(processes: dict[str, int], duration_s: float,
                           interval_s: float = SAMPLE_INTERVAL_S) -> list[ResourceSample]:
    """Sample CPU% and RSS of each labelled pid every ``interval_s``.

    CPU% is consumed CPU time over wall time for the interval (100 = one
    core). A process that exits (or lingers as a zombie) stops contributing;
    its samples so far are kept.
    """
    loop = asyncio.get_running_loop()
    live: dict[str, tuple[psutil.Process, float]] = {}
    for node, pid in processes.items():
        try:
            proc = psutil.Process(pid)
            live[node] = (proc, _cpu_seconds(proc))
        except psutil.NoSuchProcess:
            continue
    samples: list[ResourceSample] = []
    start = loop.time()
    prev_wall = start
    n = int(round(duration_s / interval_s))
    for k in range(1, n + 1):
        delay = start + k * interval_s - loop.time()
        if delay > 0:
            await asyncio.sleep(delay)
        wall = loop.time()
        elapsed = wall - prev_wall
        prev_wall = wall
        ts = time.time_ns() // 1_000_000
        for node in list(live):
            proc, prev_cpu = live[node]
            try:
                if proc.status() == psutil.STATUS_ZOMBIE:
                    raise psutil.ZombieProcess(proc.pid)
                cpu = _cpu_seconds(proc)
                rss = proc.memory_info().rss
            except (psutil.NoSuchProcess, psutil.ZombieProcess):
                del live[node]
                continue
            live[node] = (proc, cpu)
            pct = 100.0 * (cpu - prev_cpu) / elapsed if elapsed > 0 else 0.0
            samples.append(ResourceSample(ts, node, max(pct, 0.0), rss))
        if not live:
            break
    return samples
