"""Simulated physical sensors publishing straight into node brokers."""
from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field

from ..adapters import waveform_values
from ..broker import BrokerClient
from ..wire import Message, now_ms

log = logging.getLogger(__name__)


@dataclass
class LoadStats:
    published: dict[str, int] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)  # broker addr -> reason

    @property
    def total(self) -> int:
        return sum(self.published.values())


async def _drive(client: BrokerClient, sensor_id: str, rate_ms: int, duration_s: float,
                 seed: int, stats: LoadStats) -> None:
    loop = asyncio.get_running_loop()
    values = waveform_values({"waveform": "random_uniform", "amplitude": 100.0, "seed": seed})
    period = rate_ms / 1000.0
    start = loop.time()
    k = 0
    # publish at start, start+rate, ... strictly before start+duration
    while k * period < duration_s - 1e-9:
        delay = start + k * period - loop.time()
        if delay > 0:
            await asyncio.sleep(delay)
        msg = Message(sensor_id, k, now_ms(), {"value": next(values)})
        try:
            await client.publish(sensor_id, msg)
        except ConnectionError as exc:
            stats.errors.setdefault(client.addr, str(exc))
            return
        stats.published[sensor_id] += 1
        k += 1


async def run_loadgen(sensors: dict[str, str], rate_ms: int, duration_s: float,
                      seed: int = 0) -> LoadStats:
    """Publish one message per sensor every ``rate_ms`` for ``duration_s``.

    ``sensors`` maps sensor id (also its topic) to the broker address it
    publishes to. An unreachable broker is recorded in ``errors`` and its
    sensors publish nothing; the others carry on.
    """
    stats = LoadStats(published=dict.fromkeys(sensors, 0))
    clients: dict[str, BrokerClient] = {}
    for addr in sorted(set(sensors.values())):
        client = BrokerClient(addr, timeout=5.0)
        try:
            await client.start()
        except ConnectionError as exc:
            stats.errors[addr] = str(exc)
            continue
        clients[addr] = client
    try:
        tasks = [
            _drive(clients[addr], sid, rate_ms, duration_s, seed + i, stats)
            for i, (sid, addr) in enumerate(sorted(sensors.items()))
            if addr in clients
        ]
        await asyncio.gather(*tasks)
    finally:
        await asyncio.gather(*(c.close() for c in clients.values()), return_exceptions=True)
    return stats
