"""Per-node publish/subscribe broker with exact-match topics.

The :class:`Broker` core is confined to one asyncio event loop, which is what
makes its topic table safe under concurrent connections: every mutation runs
to completion between awaits. :class:`BrokerServer` exposes it over TCP and
:class:`BrokerClient` is the remote side used by consumers and publishers on
other nodes.
"""
from __future__ import annotations

import asyncio
import logging
from collections import deque
from typing import Any, AsyncIterator

from .wire import (
    Frame,
    FrameError,
    Message,
    backoff_delays,
    encode_frame,
    encode_payload,
    read_payload,
    split_addr,
)

log = logging.getLogger(__name__)

SUBSCRIPTION_BUFFER = 4096
_WRITE_HIGH_WATER = 256 * 1024


class BrokerError(Exception):
    pass


class DuplicateSubscription(BrokerError):
    pass


class UnknownSubscription(BrokerError):
    pass


_ERROR_TYPES = {
    "duplicate subscription": DuplicateSubscription,
    "unknown subscription": UnknownSubscription,
}


class Subscription:
    """A bounded message stream for one (topic, subscriber) pair.

    When the buffer is full the oldest undelivered message is dropped and
    ``dropped`` is incremented.
    """

    def __init__(self, topic: str, subscriber_id: str, capacity: int = SUBSCRIPTION_BUFFER) -> None:
        self.topic = topic
        self.subscriber_id = subscriber_id
        self.capacity = capacity
        self.dropped = 0
        self.delivered = 0
        self.closed = False
        self._buf: deque[Message] = deque()
        self._wakeup = asyncio.Event()

    @property
    def key(self) -> tuple[str, str]:
        return self.topic, self.subscriber_id

    def push(self, msg: Message) -> None:
        if self.closed:
            return
        if len(self._buf) >= self.capacity:
            self._buf.popleft()
            self.dropped += 1
        self._buf.append(msg)
        self._wakeup.set()

    def close(self) -> None:
        self.closed = True
        self._wakeup.set()

    def pending(self) -> int:
        return len(self._buf)

    def get_nowait(self) -> Message | None:
        if self._buf:
            self.delivered += 1
            return self._buf.popleft()
        return None

    def drain_nowait(self) -> list[Message]:
        out = list(self._buf)
        self.delivered += len(out)
        self._buf.clear()
        return out

    async def get(self) -> Message:
        """Next message; raises StopAsyncIteration once closed and drained."""
        while not self._buf:
            if self.closed:
                raise StopAsyncIteration
            self._wakeup.clear()
            await self._wakeup.wait()
        self.delivered += 1
        return self._buf.popleft()

    def __aiter__(self) -> AsyncIterator[Message]:
        return self

    async def __anext__(self) -> Message:
        return await self.get()


class Broker:
    def __init__(self, buffer_size: int = SUBSCRIPTION_BUFFER) -> None:
        self.buffer_size = buffer_size
        self._topics: dict[str, dict[str, Subscription]] = {}
        self.published = 0

    def publish(self, topic: str, msg: Message) -> int:
        """Fan ``msg`` out to the current subscribers of ``topic``; returns their count."""
        subs = self._topics.setdefault(topic, {})
        self.published += 1
        for sub in subs.values():
            sub.push(msg)
        return len(subs)

    def subscribe(self, topic: str, subscriber_id: str) -> Subscription:
        subs = self._topics.setdefault(topic, {})
        if subscriber_id in subs:
            raise DuplicateSubscription(f"{subscriber_id!r} already subscribed to {topic!r}")
        sub = Subscription(topic, subscriber_id, self.buffer_size)
        subs[subscriber_id] = sub
        return sub

    def unsubscribe(self, topic: str, subscriber_id: str) -> None:
        subs = self._topics.get(topic, {})
        sub = subs.pop(subscriber_id, None)
        if sub is None:
            raise UnknownSubscription(f"{subscriber_id!r} is not subscribed to {topic!r}")
        sub.close()

    def topics(self) -> list[str]:
        return sorted(self._topics)

    def subscriptions(self, subscriber_id: str | None = None) -> list[tuple[str, str]]:
        return sorted(
            (topic, sid)
            for topic, subs in self._topics.items()
            for sid in subs
            if subscriber_id is None or sid == subscriber_id
        )

    def stats(self) -> dict[str, Any]:
        subs = [s for t in self._topics.values() for s in t.values()]
        return {
            "topics": len(self._topics),
            "subscriptions": len(subs),
            "published": self.published,
            "dropped": sum(s.dropped for s in subs),
        }


class _Connection:
    def __init__(self, broker: Broker, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        self.broker = broker
        self.reader = reader
        self.writer = writer
        self.subs: dict[tuple[str, str], tuple[Subscription, asyncio.Task]] = {}
        self._drain_lock = asyncio.Lock()

    async def send(self, frame: Frame) -> None:
        self.writer.write(encode_frame(frame))
        transport = self.writer.transport
        if transport.get_write_buffer_size() > _WRITE_HIGH_WATER:
            async with self._drain_lock:
                await self.writer.drain()

    async def _forward(self, sub: Subscription) -> None:
        try:
            async for msg in sub:
                await self.send(Frame("deliver", topic=sub.topic, message=msg, subscriber=sub.subscriber_id))
        except (ConnectionError, OSError):
            pass

    def _drop(self, key: tuple[str, str]) -> None:
        _, task = self.subs.pop(key)
        try:
            self.broker.unsubscribe(*key)
        except UnknownSubscription:
            pass
        task.cancel()

    async def handle(self, frame: Frame) -> Frame:
        if frame.cmd == "publish":
            assert frame.topic is not None and frame.message is not None
            self.broker.publish(frame.topic, frame.message)
            return Frame("ack", topic=frame.topic)
        if frame.cmd == "subscribe":
            assert frame.topic is not None and frame.subscriber is not None
            try:
                sub = self.broker.subscribe(frame.topic, frame.subscriber)
            except DuplicateSubscription:
                return Frame("error", topic=frame.topic, subscriber=frame.subscriber,
                             reason="duplicate subscription")
            task = asyncio.create_task(self._forward(sub))
            self.subs[sub.key] = (sub, task)
            return Frame("ack", topic=frame.topic, subscriber=frame.subscriber)
        if frame.cmd == "unsubscribe":
            assert frame.topic is not None and frame.subscriber is not None
            key = (frame.topic, frame.subscriber)
            if key not in self.subs:
                return Frame("error", topic=frame.topic, subscriber=frame.subscriber,
                             reason="unknown subscription")
            self._drop(key)
            return Frame("ack", topic=frame.topic, subscriber=frame.subscriber)
        return Frame("error", reason=f"unexpected command {frame.cmd!r}")

    async def run(self) -> None:
        try:
            while True:
                try:
                    payload = await read_payload(self.reader)
                except FrameError as exc:
                    await self.send(Frame("error", reason=f"malformed frame: {exc}"))
                    return
                if payload is None:
                    return
                try:
                    frame = Frame.from_dict(payload)
                except (FrameError, KeyError, TypeError) as exc:
                    await self.send(Frame("error", reason=f"malformed frame: {exc}"))
                    continue
                await self.send(await self.handle(frame))
        except (ConnectionError, OSError):
            pass
        finally:
            for key in list(self.subs):
                self._drop(key)
            self.writer.close()


class BrokerServer:
    """TCP front end for a :class:`Broker`."""

    def __init__(self, broker: Broker | None = None) -> None:
        self.broker = broker or Broker()
        self._server: asyncio.base_events.Server | None = None
        self._conns: set[asyncio.Task] = set()
        self.address: str | None = None

    async def start(self, addr: str) -> str:
        host, port = split_addr(addr)
        self._server = await asyncio.start_server(self._on_connect, host, port)
        bound = self._server.sockets[0].getsockname()
        self.address = f"{host}:{bound[1]}"
        log.info("broker listening on %s", self.address)
        return self.address

    async def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        assert task is not None
        self._conns.add(task)
        try:
            await _Connection(self.broker, reader, writer).run()
        finally:
            self._conns.discard(task)

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            for task in list(self._conns):
                task.cancel()
            await asyncio.gather(*self._conns, return_exceptions=True)
            await self._server.wait_closed()
            self._server = None


class BrokerClient:
    """Client for a remote broker.

    With ``reconnect=True`` the client keeps retrying with exponential
    backoff (100 ms base, 5 s cap) and re-establishes every registered
    subscription after each reconnect; publishes raise ConnectionError
    while the link is down.
    """

    def __init__(self, addr: str, *, reconnect: bool = False, timeout: float = 5.0,
                 backoff_base: float = 0.1, backoff_cap: float = 5.0) -> None:
        self.addr = addr
        self.reconnect = reconnect
        self.timeout = timeout
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._pending: deque[asyncio.Future] = deque()
        self._subs: dict[tuple[str, str], Subscription] = {}
        self._connected = asyncio.Event()
        self._runner: asyncio.Task | None = None
        self._closing = False
        self.reconnects = 0

    @property
    def connected(self) -> bool:
        return self._connected.is_set()

    async def start(self) -> "BrokerClient":
        if self.reconnect:
            self._runner = asyncio.create_task(self._maintain())
        else:
            await self._connect()
            self._runner = asyncio.create_task(self._read_loop())
        return self

    async def __aenter__(self) -> "BrokerClient":
        return await self.start()

    async def __aexit__(self, *exc: object) -> None:
        await self.close()

    async def wait_connected(self, timeout: float | None = None) -> None:
        await asyncio.wait_for(self._connected.wait(), timeout)

    async def _connect(self) -> None:
        host, port = split_addr(self.addr)
        try:
            self._reader, self._writer = await asyncio.wait_for(
                asyncio.open_connection(host, port), self.timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            raise ConnectionError(f"cannot reach broker {self.addr}: {exc}") from exc
        self._connected.set()

    async def _maintain(self) -> None:
        delays = backoff_delays(self.backoff_base, self.backoff_cap)
        while not self._closing:
            try:
                await self._connect()
            except ConnectionError as exc:
                log.debug("%s", exc)
                await asyncio.sleep(next(delays))
                continue
            delays = backoff_delays(self.backoff_base, self.backoff_cap)
            reader_task = asyncio.create_task(self._read_loop())
            try:
                for topic, sid in list(self._subs):
                    try:
                        await self._call(Frame("subscribe", topic=topic, subscriber=sid))
                    except DuplicateSubscription:
                        pass
            except ConnectionError:
                pass
            await reader_task
            if not self._closing:
                self.reconnects += 1
                await asyncio.sleep(next(delays))

    async def _read_loop(self) -> None:
        assert self._reader is not None
        try:
            while True:
                payload = await read_payload(self._reader)
                if payload is None:
                    break
                frame = Frame.from_dict(payload)
                if frame.cmd == "deliver":
                    sub = self._subs.get((frame.topic or "", frame.subscriber or ""))
                    if sub is not None and frame.message is not None:
                        sub.push(frame.message)
                elif frame.cmd in ("ack", "error"):
                    if self._pending:
                        fut = self._pending.popleft()
                        if not fut.done():
                            fut.set_result(frame)
                    elif frame.cmd == "error":
                        log.warning("broker %s: %s", self.addr, frame.reason)
        except (ConnectionError, OSError, FrameError) as exc:
            log.debug("broker %s link lost: %s", self.addr, exc)
        finally:
            self._connected.clear()
            while self._pending:
                fut = self._pending.popleft()
                if not fut.done():
                    fut.set_exception(ConnectionError(f"link to {self.addr} lost"))
            if self._writer is not None:
                self._writer.close()
            if not self.reconnect:
                for sub in self._subs.values():
                    sub.close()

    async def _call(self, frame: Frame) -> Frame:
        if not self.connected or self._writer is None:
            raise ConnectionError(f"not connected to {self.addr}")
        fut = asyncio.get_running_loop().create_future()
        self._pending.append(fut)
        try:
            self._writer.write(encode_frame(frame))
            await self._writer.drain()
        except (OSError, RuntimeError) as exc:
            raise ConnectionError(str(exc)) from exc
        try:
            reply: Frame = await asyncio.wait_for(asyncio.shield(fut), self.timeout)
        except asyncio.TimeoutError:
            raise ConnectionError(f"no reply from {self.addr}") from None
        if reply.cmd == "error":
            exc_type = _ERROR_TYPES.get(reply.reason or "", BrokerError)
            raise exc_type(reply.reason)
        return reply

    async def publish(self, topic: str, msg: Message) -> None:
        await self._call(Frame("publish", topic=topic, message=msg))

    async def send_raw(self, payload: dict[str, Any]) -> Frame:
        """Send an arbitrary payload and wait for the broker's ack/error (for tests)."""
        if self._writer is None:
            raise ConnectionError("not connected")
        fut = asyncio.get_running_loop().create_future()
        self._pending.append(fut)
        self._writer.write(encode_payload(payload))
        return await asyncio.wait_for(fut, self.timeout)

    async def subscribe(self, topic: str, subscriber_id: str) -> Subscription:
        key = (topic, subscriber_id)
        if key in self._subs:
            raise DuplicateSubscription(f"{subscriber_id!r} already subscribed to {topic!r}")
        sub = Subscription(topic, subscriber_id)
        self._subs[key] = sub
        if self.connected:
            try:
                await self._call(Frame("subscribe", topic=topic, subscriber=subscriber_id))
            except DuplicateSubscription:
                del self._subs[key]
                raise
            except ConnectionError:
                if not self.reconnect:
                    del self._subs[key]
                    raise
        elif not self.reconnect:
            del self._subs[key]
            raise ConnectionError(f"not connected to {self.addr}")
        return sub

    async def unsubscribe(self, topic: str, subscriber_id: str) -> None:
        sub = self._subs.pop((topic, subscriber_id), None)
        if sub is None:
            raise UnknownSubscription(f"{subscriber_id!r} is not subscribed to {topic!r}")
        sub.close()
        if self.connected:
            try:
                await self._call(Frame("unsubscribe", topic=topic, subscriber=subscriber_id))
            except (ConnectionError, UnknownSubscription):
                pass

    @property
    def subscription_keys(self) -> list[tuple[str, str]]:
        return sorted(self._subs)

    async def close(self) -> None:
        self._closing = True
        for sub in self._subs.values():
            sub.close()
        if self._writer is not None:
            self._writer.close()
        if self._runner is not None:
            self._runner.cancel()
            try:
                await self._runner
            except (asyncio.CancelledError, Exception):
                pass
        self._connected.clear()
