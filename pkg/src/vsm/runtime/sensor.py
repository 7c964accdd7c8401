"""The running virtual sensor: consumers, tick timer, publisher, heartbeats."""
from __future__ import annotations

import asyncio
import inspect
import logging
from collections import deque
from typing import Any, Awaitable, Callable

from ..adapters import Adapter, adapter_open
from ..broker import Broker, BrokerClient, Subscription, UnknownSubscription
from ..config import InputSpec, VSConfig
from ..storage import DataManager
from ..wire import Message, backoff_delays, encode_payload, now_ms, split_addr
from .processor import TypeMismatch, process
from .state import AggregatedTuple, UnknownSource, VSState

log = logging.getLogger(__name__)

PUBLISH_BUFFER = 256


class BrokerLinks:
    """Routes subscriptions to the in-process broker or to pooled remote clients.

    ``local_addr`` is the advertised address of ``local``; inputs naming it
    are served in-process without a TCP hop.
    """

    def __init__(self, local: Broker | None = None, local_addr: str | None = None,
                 publish_addr: str | None = None) -> None:
        self.local = local
        self.local_addr = local_addr
        self.publish_addr = publish_addr
        self._clients: dict[str, BrokerClient] = {}

    def is_local(self, addr: str | None) -> bool:
        return self.local is not None and (addr is None or addr == self.local_addr)

    async def client(self, addr: str) -> BrokerClient:
        c = self._clients.get(addr)
        if c is None:
            c = BrokerClient(addr, reconnect=True)
            self._clients[addr] = c
            await c.start()
        return c

    async def subscribe(self, addr: str | None, topic: str, subscriber_id: str) -> Subscription:
        if self.is_local(addr):
            assert self.local is not None
            return self.local.subscribe(topic, subscriber_id)
        assert addr is not None
        return await (await self.client(addr)).subscribe(topic, subscriber_id)

    async def unsubscribe(self, addr: str | None, topic: str, subscriber_id: str) -> None:
        if self.is_local(addr):
            assert self.local is not None
            self.local.unsubscribe(topic, subscriber_id)
            return
        assert addr is not None
        await (await self.client(addr)).unsubscribe(topic, subscriber_id)

    async def publish(self, topic: str, msg: Message) -> None:
        if self.publish_addr is not None:
            await (await self.client(self.publish_addr)).publish(topic, msg)
        elif self.local is not None:
            self.local.publish(topic, msg)
        else:
            raise ConnectionError("no broker to publish to")

    async def close(self) -> None:
        clients, self._clients = list(self._clients.values()), {}
        await asyncio.gather(*(c.close() for c in clients), return_exceptions=True)


SendFn = Callable[[str, Message], Any]


class Publisher:
    """Publishes in order; while the broker is unreachable, keeps the newest
    256 messages and retries with exponential backoff (100 ms .. 5 s)."""

    def __init__(self, send: SendFn, capacity: int = PUBLISH_BUFFER,
                 backoff_base: float = 0.1, backoff_cap: float = 5.0) -> None:
        self._send = send
        self.capacity = capacity
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.buffer: deque[tuple[str, Message]] = deque()
        self.dropped = 0
        self.failures = 0
        self._retry: asyncio.Task | None = None

    async def _deliver(self, topic: str, msg: Message) -> None:
        result = self._send(topic, msg)
        if inspect.isawaitable(result):
            await result

    async def publish(self, topic: str, msg: Message) -> bool:
        """True if sent now, False if it was buffered for retry."""
        if not self.buffer:
            try:
                await self._deliver(topic, msg)
                return True
            except ConnectionError as exc:
                self.failures += 1
                log.warning("publish to %r failed, buffering: %s", topic, exc)
        self._buffer(topic, msg)
        if self._retry is None or self._retry.done():
            self._retry = asyncio.create_task(self._retry_loop())
        return False

    def _buffer(self, topic: str, msg: Message) -> None:
        if len(self.buffer) >= self.capacity:
            self.buffer.popleft()
            self.dropped += 1
        self.buffer.append((topic, msg))

    async def _retry_loop(self) -> None:
        delays = backoff_delays(self.backoff_base, self.backoff_cap)
        while self.buffer:
            await asyncio.sleep(next(delays))
            while self.buffer:
                topic, msg = self.buffer[0]
                try:
                    await self._deliver(topic, msg)
                except ConnectionError:
                    self.failures += 1
                    break
                self.buffer.popleft()
                delays = backoff_delays(self.backoff_base, self.backoff_cap)

    async def close(self) -> None:
        if self._retry is not None:
            self._retry.cancel()
            await asyncio.gather(self._retry, return_exceptions=True)


class HeartbeatEmitter:
    """Sends ``{cmd: heartbeat, vs_id, node, ts, counters, interval_ms}`` frames.

    The first heartbeat goes out one interval after the first start. After a
    stop/start the schedule resumes from the last send, so an overdue
    heartbeat is sent immediately.
    """

    def __init__(self, vs_id: str, node: str, endpoint: str, interval_ms: int,
                 counters: Callable[[], dict[str, int]]) -> None:
        self.vs_id = vs_id
        self.node = node
        self.endpoint = endpoint
        self.interval_ms = interval_ms
        self.counters = counters
        self.sent = 0
        self.failed = 0
        self.last_sent_ms: int | None = None
        self._task: asyncio.Task | None = None
        self._writer: asyncio.StreamWriter | None = None

    @property
    def running(self) -> bool:
        return self._task is not None and not self._task.done()

    def start(self) -> None:
        if not self.running:
            self._task = asyncio.create_task(self._run())

    async def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            await asyncio.gather(self._task, return_exceptions=True)
            self._task = None
        self._disconnect()

    def _disconnect(self) -> None:
        if self._writer is not None:
            self._writer.close()
            self._writer = None

    def frame(self, ts: int) -> dict[str, Any]:
        return {"cmd": "heartbeat", "vs_id": self.vs_id, "node": self.node, "ts": ts,
                "counters": self.counters(), "interval_ms": self.interval_ms}

    async def send_once(self, ts: int | None = None) -> bool:
        ts = now_ms() if ts is None else ts
        self.last_sent_ms = ts
        payload = encode_payload(self.frame(ts))
        try:
            if self._writer is None or self._writer.is_closing():
                host, port = split_addr(self.endpoint)
                _, self._writer = await asyncio.wait_for(asyncio.open_connection(host, port), 1.0)
            self._writer.write(payload)
            await asyncio.wait_for(self._writer.drain(), 1.0)
        except (OSError, asyncio.TimeoutError, ValueError) as exc:
            self.failed += 1
            self._disconnect()
            log.debug("%s: heartbeat to %s dropped: %s", self.vs_id, self.endpoint, exc)
            return False
        self.sent += 1
        return True

    async def _run(self) -> None:
        loop = asyncio.get_running_loop()
        interval = self.interval_ms / 1000.0
        if self.last_sent_ms is None:
            due = loop.time() + interval
        else:
            due = loop.time() + (self.last_sent_ms + self.interval_ms - now_ms()) / 1000.0
        while True:
            delay = due - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            await self.send_once()
            due = max(due + interval, loop.time())


class VirtualSensor:
    """One running virtual sensor built from a VSConfig.

    Virtual inputs are consumed through :class:`BrokerLinks`; a physical
    input gets its own adapter. A sensor whose only input is a single
    physical adapter is adapter-driven: each sample is processed and
    published as it arrives instead of waiting for a tick.
    """

    def __init__(self, config: VSConfig, links: BrokerLinks, *,
                 publisher: Publisher | None = None) -> None:
        self.state = VSState(config)
        self.links = links
        self.publisher = publisher or Publisher(links.publish)
        self.heartbeat = HeartbeatEmitter(config.id, config.node, config.monitor.endpoint,
                                          config.monitor.interval_ms, self.counters)
        self.storage = DataManager(config.storage.path, config.id) if config.storage.enabled else None
        self._consumers: dict[str, tuple[InputSpec, asyncio.Task, Any]] = {}
        self._tick_task: asyncio.Task | None = None
        self._lock = asyncio.Lock()
        self.outputs: deque[Message] = deque(maxlen=64)
        self.running = False

    @property
    def config(self) -> VSConfig:
        return self.state.config

    @property
    def id(self) -> str:
        return self.state.config.id

    def counters(self) -> dict[str, int]:
        c = self.state.snapshot()
        c["dropped_publish"] = self.publisher.dropped
        if self.storage is not None:
            c["storage_errors"] = self.storage.errors
        return c

    @property
    def adapter_driven(self) -> bool:
        ins = self.config.inputs
        return len(ins) == 1 and ins[0].kind == "physical"

    # -- lifecycle --------------------------------------------------------

    async def start(self) -> None:
        self.running = True
        for spec in self.config.inputs:
            await self._start_consumer(spec)
        self._restart_tick()
        self.heartbeat.start()

    async def stop(self) -> None:
        self.running = False
        if self._tick_task is not None:
            self._tick_task.cancel()
            await asyncio.gather(self._tick_task, return_exceptions=True)
            self._tick_task = None
        for sid in list(self._consumers):
            await self._stop_consumer(sid)
        await self.heartbeat.stop()
        await self.publisher.close()
        if self.storage is not None:
            self.storage.close()

    async def _start_consumer(self, spec: InputSpec) -> None:
        if spec.kind == "physical":
            assert spec.adapter is not None
            adapter = await adapter_open(spec.adapter, spec.source_id)
            task = asyncio.create_task(self._run_adapter(spec.source_id, adapter))
            self._consumers[spec.source_id] = (spec, task, adapter)
        else:
            sub = await self.links.subscribe(spec.broker_addr, spec.source_id, self.id)
            task = asyncio.create_task(self._run_subscription(spec.source_id, sub))
            self._consumers[spec.source_id] = (spec, task, sub)

    async def _stop_consumer(self, source_id: str) -> None:
        spec, task, handle = self._consumers.pop(source_id)
        if isinstance(handle, Adapter):
            await handle.close()
        else:
            try:
                await self.links.unsubscribe(spec.broker_addr, spec.source_id, self.id)
            except UnknownSubscription:
                pass
        task.cancel()
        await asyncio.gather(task, return_exceptions=True)

    async def _run_subscription(self, source_id: str, sub: Subscription) -> None:
        async for msg in sub:
            self._consume(source_id, msg)

    async def _run_adapter(self, source_id: str, adapter: Adapter) -> None:
        try:
            async for msg in adapter:
                self._consume(source_id, msg)
                if self.adapter_driven:
                    await self.tick()
        except Exception:
            log.exception("%s: adapter for %s failed", self.id, source_id)

    def _consume(self, source_id: str, msg: Message) -> None:
        try:
            self.state.consume(source_id, msg)
        except UnknownSource:
            pass

    def _restart_tick(self) -> None:
        if self._tick_task is not None:
            self._tick_task.cancel()
            self._tick_task = None
        if self.config.inputs and not self.adapter_driven:
            self._tick_task = asyncio.create_task(self._tick_loop(self.config.read_rate_ms))

    async def _tick_loop(self, rate_ms: int) -> None:
        loop = asyncio.get_running_loop()
        period = rate_ms / 1000.0
        due = loop.time() + period
        while True:
            delay = due - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            try:
                await self.tick()
            except Exception:
                log.exception("%s: tick failed", self.id)
            due = max(due + period, loop.time())

    async def tick(self, tick_ts: int | None = None) -> Message | None:
        """Run one aggregation tick; returns the published message if any."""
        async with self._lock:
            tup = self.state.aggregate_tick(now_ms() if tick_ts is None else tick_ts)
            if tup is None:
                return None
            return await self._process_and_publish(tup)

    async def _process_and_publish(self, tup: AggregatedTuple) -> Message | None:
        try:
            values = process(self.config.processor, tup)
        except TypeMismatch as exc:
            self.state.counters["rejected_tuples"] += 1
            log.warning("%s: tuple skipped: %s", self.id, exc)
            return None
        if not values:
            return None
        return await self.publish_output(values)

    async def publish_output(self, values: dict[str, Any]) -> Message:
        msg = self.state.next_output(values)
        self.outputs.append(msg)
        await self.publisher.publish(self.config.output_topic, msg)
        if self.storage is not None:
            self.storage.persist(msg)
        return msg

    # -- hot reconfiguration ----------------------------------------------

    async def reconfigure(self, new: VSConfig) -> None:
        """Apply an updated config without losing seq_out or retained queues."""
        async with self._lock:
            old = self.config
            diff = self.state.reconfigure(new)
            for spec in diff.removed_inputs:
                await self._stop_consumer(spec.source_id)
            # same source id but a different broker or adapter: rewire, keep the queue
            for spec in new.inputs:
                prev = old.input(spec.source_id)
                if prev is not None and prev != spec:
                    await self._stop_consumer(spec.source_id)
                    await self._start_consumer(spec)
            for spec in diff.added_inputs:
                await self._start_consumer(spec)

            was_driven = len(old.inputs) == 1 and old.inputs[0].kind == "physical"
            if ("read_rate_ms" in diff.changed_scalars or was_driven != self.adapter_driven
                    or bool(old.inputs) != bool(new.inputs)):
                self._restart_tick()
            if "monitor" in diff.changed_scalars:
                await self.heartbeat.stop()
                self.heartbeat.endpoint = new.monitor.endpoint
                self.heartbeat.interval_ms = new.monitor.interval_ms
                self.heartbeat.start()
            if "storage" in diff.changed_scalars:
                if self.storage is not None:
                    self.storage.close()
                self.storage = DataManager(new.storage.path, new.id) if new.storage.enabled else None

    def subscriptions(self) -> list[str]:
        return sorted(sid for sid, (spec, _, _) in self._consumers.items() if spec.kind == "virtual")
