"""Per-source priority queues, the aggregation tick and the fault policies.

Everything here is synchronous and deterministic given the caller's
timestamps, so it can be driven tick-by-tick in tests. The asyncio wiring
lives in :mod:`vsm.runtime.sensor`.
"""
from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Iterator, Mapping

from ..config import VSConfig, diff_config, ConfigDiff
from ..wire import Message, now_ms

log = logging.getLogger(__name__)

QUEUE_CAPACITY = 1024

COUNTER_NAMES = ("consumed", "published", "dropped_overflow", "dropped_fault",
                 "faults_partial", "rejected_tuples", "storage_errors")


class _Absent:
    _instance = None

    def __new__(cls) -> "_Absent":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ABSENT"

    def __bool__(self) -> bool:
        return False


ABSENT = _Absent()


class UnknownSource(KeyError):
    pass


@dataclass(frozen=True)
class TimedMessage:
    msg: Message
    ts_consumed: int

    @property
    def order_key(self) -> tuple[int, int, str]:
        m = self.msg
        return m.ts_published, m.seq, m.source


class SourceQueue:
    """Min-heap of TimedMessage keyed by (ts_published, seq, source).

    On overflow the entry with the smallest key is evicted.
    """

    def __init__(self, source_id: str, capacity: int = QUEUE_CAPACITY) -> None:
        self.source_id = source_id
        self.capacity = capacity
        self.dropped = 0
        self._heap: list[tuple[tuple[int, int, str], int, TimedMessage]] = []
        self._tiebreak = itertools.count()

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, tm: TimedMessage) -> TimedMessage | None:
        """Insert; returns the evicted entry if capacity was exceeded."""
        heapq.heappush(self._heap, (tm.order_key, next(self._tiebreak), tm))
        if len(self._heap) > self.capacity:
            self.dropped += 1
            return heapq.heappop(self._heap)[2]
        return None

    def peek(self) -> TimedMessage | None:
        return self._heap[0][2] if self._heap else None

    def pop(self) -> TimedMessage:
        return heapq.heappop(self._heap)[2]

    def clear(self) -> int:
        n = len(self._heap)
        self._heap.clear()
        return n

    def __iter__(self) -> Iterator[TimedMessage]:
        return (entry[2] for entry in sorted(self._heap))


@dataclass
class AggregatedTuple:
    slots: dict[str, Any]  # source_id -> TimedMessage | ABSENT, in config input order
    tick_ts: int

    @property
    def complete(self) -> bool:
        return all(v is not ABSENT for v in self.slots.values())

    def present(self) -> dict[str, TimedMessage]:
        return {k: v for k, v in self.slots.items() if v is not ABSENT}


@dataclass
class VSState:
    config: VSConfig
    capacity: int = QUEUE_CAPACITY
    queues: dict[str, SourceQueue] = field(init=False)
    seq_out: int = 0
    wait_ticks_elapsed: int = 0
    counters: dict[str, int] = field(init=False)
    last_output: Message | None = None
    emitted: int = 0  # queue entries that left in a tuple

    def __post_init__(self) -> None:
        self.queues = {sid: SourceQueue(sid, self.capacity) for sid in self.config.input_ids}
        self.counters = dict.fromkeys(COUNTER_NAMES, 0)

    # -- consumer side ----------------------------------------------------

    def consume(self, source_id: str, msg: Message, ts_consumed: int | None = None) -> TimedMessage:
        queue = self.queues.get(source_id)
        if queue is None:
            log.error("%s: message for unconfigured source %r discarded", self.config.id, source_id)
            raise UnknownSource(source_id)
        tm = TimedMessage(msg, now_ms() if ts_consumed is None else ts_consumed)
        self.counters["consumed"] += 1
        if queue.push(tm) is not None:
            self.counters["dropped_overflow"] += 1
        return tm

    def queued(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def conservation_holds(self) -> bool:
        c = self.counters
        return c["consumed"] == self.queued() + self.emitted + c["dropped_overflow"] + c["dropped_fault"]

    # -- aggregator -------------------------------------------------------

    def aggregate_tick(self, tick_ts: int) -> AggregatedTuple | None:
        """Take one head per queue if every queue has one, else apply the fault policy."""
        if all(len(q) for q in self.queues.values()):
            slots = {}
            for sid, q in self.queues.items():
                slots[sid] = q.pop()
            self.emitted += len(slots)
            self.wait_ticks_elapsed = 0
            return AggregatedTuple(slots, tick_ts)
        return self.handle_fault(tick_ts)

    def handle_fault(self, tick_ts: int) -> AggregatedTuple | None:
        policy = self.config.fault_policy
        if policy.kind == "wait":
            assert policy.max_wait_ticks is not None
            if self.wait_ticks_elapsed < policy.max_wait_ticks:
                self.wait_ticks_elapsed += 1
                return None
            self.wait_ticks_elapsed = 0
            return self._take_partial(tick_ts)
        if policy.kind == "drop":
            taken = self._pop_available()
            self.counters["dropped_fault"] += sum(v is not ABSENT for v in taken.values())
            return None
        return self._take_partial(tick_ts)

    def _pop_available(self) -> dict[str, Any]:
        return {sid: (q.pop() if len(q) else ABSENT) for sid, q in self.queues.items()}

    def _take_partial(self, tick_ts: int) -> AggregatedTuple:
        tup = AggregatedTuple(self._pop_available(), tick_ts)
        self.emitted += len(tup.present())
        self.counters["faults_partial"] += 1
        return tup

    # -- publisher side ---------------------------------------------------

    def next_output(self, values: Mapping[str, Any], ts: int | None = None) -> Message:
        """Stamp and number one output message, advancing the counters."""
        if not values:
            raise ValueError("output values must be non-empty")
        msg = Message(self.config.id, self.seq_out, now_ms() if ts is None else ts, dict(values))
        self.seq_out += 1
        self.counters["published"] += 1
        self.last_output = msg
        return msg

    # -- reconfiguration --------------------------------------------------

    def reconfigure(self, new: VSConfig) -> ConfigDiff:
        """Swap in ``new``, keeping queues of retained sources and seq_out.

        Entries queued for removed sources are counted as dropped_fault.
        """
        diff = diff_config(self.config, new)
        queues = {}
        for sid in new.input_ids:
            queues[sid] = self.queues.pop(sid, None) or SourceQueue(sid, self.capacity)
        for q in self.queues.values():
            self.counters["dropped_fault"] += q.clear()
        self.queues = queues
        if diff.changed_scalars & {"fault_policy"}:
            self.wait_ticks_elapsed = 0
        self.config = new
        return diff

    def snapshot(self) -> dict[str, int]:
        return dict(self.counters)
