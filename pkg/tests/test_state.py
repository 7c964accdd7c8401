import random
from fractions import Fraction
from itertools import combinations

import pytest
from hypothesis import given, settings, strategies as st

from vsm.config import config_from_dict
from vsm.runtime.processor import TypeMismatch, process
from vsm.runtime.state import ABSENT, AggregatedTuple, SourceQueue, TimedMessage, UnknownSource, VSState
from vsm.wire import Message

from conftest import make_doc, virtual
from oracles import MISSING, RefAggregator, random_stream


def state(sources=("A", "B"), fault=None, capacity=1024, **kw):
    doc = make_doc(inputs=[virtual(s) for s in sources], fault_policy=fault or {"kind": "proceed"}, **kw)
    return VSState(config_from_dict(doc), capacity)


def m(source, ts, value=None, seq=None):
    return Message(source, ts if seq is None else seq, ts, {"value": ts if value is None else value})


def test_consume_inserts():
    s = state(("A",))
    s.consume("A", m("A", 5), ts_consumed=11)
    assert [tm.msg.ts_published for tm in s.queues["A"]] == [5]
    assert s.counters["consumed"] == 1
    with pytest.raises(UnknownSource):
        s.consume("Z", m("Z", 1))


@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=200, unique=True))
def test_dequeue_order_matches_sort(ts_list):
    q = SourceQueue("A")
    for i, ts in enumerate(ts_list):
        q.push(TimedMessage(Message("A", i, ts, {}), 0))
    out = [q.pop().msg.ts_published for _ in range(len(ts_list))]
    assert out == sorted(ts_list)


def test_overflow_evicts_minimum():
    s = state(("A",))
    rng = random.Random(3)
    ts = rng.sample(range(100_000), 1025)
    for i, t in enumerate(ts[:1024]):
        s.consume("A", Message("A", i, t, {}))
    s.consume("A", Message("A", 1024, ts[1024], {}))
    assert len(s.queues["A"]) == 1024
    assert s.counters["dropped_overflow"] == 1
    remaining = {tm.msg.ts_published for tm in s.queues["A"]}
    assert min(ts) not in remaining
    assert remaining == set(ts) - {min(ts)}


def test_dequeue_trace_example():
    s = state()
    s.consume("A", Message("A", 0, 1, {"value": 2}))
    s.consume("A", Message("A", 1, 3, {"value": 4}))
    s.consume("B", Message("B", 0, 2, {"value": 10}))
    tup = s.aggregate_tick(100)
    assert {k: v.msg.values["value"] for k, v in tup.slots.items()} == {"A": 2, "B": 10}
    assert [tm.msg.ts_published for tm in s.queues["A"]] == [3]


def test_all_empty_goes_to_fault_handler():
    s = state()
    tup = s.aggregate_tick(1)
    assert tup.slots == {"A": ABSENT, "B": ABSENT}
    assert s.counters["faults_partial"] == 1


def test_single_input():
    s = state(("in",))
    s.consume("in", m("in", 1))
    tup = s.aggregate_tick(1)
    assert tup.complete and len(s.queues["in"]) == 0


def test_proceed_partial():
    s = state()
    s.consume("A", m("A", 1))
    tup = s.aggregate_tick(1)
    assert tup.slots["B"] is ABSENT and tup.slots["A"].msg.ts_published == 1


def test_wait_recovers_before_limit():
    s = state(fault={"kind": "wait", "max_wait_ticks": 3})
    s.consume("A", m("A", 1))
    assert s.aggregate_tick(1) is None
    assert s.aggregate_tick(2) is None
    s.consume("B", m("B", 1))
    tup = s.aggregate_tick(3)
    assert tup.complete
    assert s.wait_ticks_elapsed == 0


def test_drop_discards():
    s = state(fault={"kind": "drop"})
    s.consume("A", m("A", 1))
    assert s.aggregate_tick(1) is None
    assert s.counters["dropped_fault"] == 1
    assert s.queued() == 0
    assert s.conservation_holds()


def test_seq_out_and_counters():
    s = state()
    a = s.next_output({"value": 1}, ts=5)
    b = s.next_output({"value": 2}, ts=6)
    assert (a.seq, b.seq) == (0, 1)
    assert s.seq_out == s.counters["published"] == 2
    with pytest.raises(ValueError):
        s.next_output({})


def test_reconfigure_keeps_retained_queue():
    s = state(("a", "b"))
    s.consume("a", m("a", 1))
    s.consume("b", m("b", 2))
    s.consume("b", m("b", 3))
    s.next_output({"value": 0})
    new = config_from_dict(make_doc(inputs=[virtual("b"), virtual("c")]))
    diff = s.reconfigure(new)
    assert [i.source_id for i in diff.added_inputs] == ["c"]
    assert [tm.msg.ts_published for tm in s.queues["b"]] == [2, 3]
    assert "a" not in s.queues and len(s.queues["c"]) == 0
    assert s.counters["dropped_fault"] == 1
    assert s.seq_out == 1
    assert s.conservation_holds()


# --- processor --------------------------------------------------------------

def tup(**slots):
    return AggregatedTuple({k: (ABSENT if v is ABSENT else TimedMessage(
        Message(k, 0, v[0], v[1]), 0)) for k, v in slots.items()}, 0)


def proc(fn, **kw):
    from vsm.config import ProcessorSpec
    return ProcessorSpec(fn, kw.pop("field", "value"), kw)


def test_mean_examples():
    t = tup(A=(1, {"value": 2}), B=(2, {"value": 4}), C=(3, {"value": 6}))
    assert process(proc("mean"), t) == {"value": 4}
    assert process(proc("mean"), tup(A=(1, {"value": 5}), B=ABSENT)) == {"value": 5}
    assert process(proc("mean"), tup(A=ABSENT, B=ABSENT)) is None


def test_other_aggregates():
    t = tup(A=(1, {"value": 2}), B=(2, {"value": 4.5}), C=(3, {"value": None}), D=(4, {"x": 1}))
    assert process(proc("sum"), t) == {"value": 6.5}
    assert process(proc("min"), t) == {"value": 2}
    assert process(proc("max"), t) == {"value": 4.5}
    assert process(proc("count"), t) == {"value": 2}
    assert process(proc("last"), t) == {"x": 1}
    with pytest.raises(TypeMismatch):
        process(proc("mean"), tup(A=(1, {"value": "hot"})))


def test_threshold_and_passthrough():
    t = tup(A=(1, {"value": 12}), B=(2, {"value": 3}))
    assert process(proc("threshold", op="gt", limit=10), t) == {"A": 12}
    assert process(proc("threshold", op="gt", limit=100), t) is None
    single = tup(A=(1, {"value": 12, "unit": "C"}))
    assert process(proc("threshold", op="ge", limit=12), single) == {"value": 12, "unit": "C"}
    assert process(proc("passthrough"), tup(A=(1, {"value": 7}))) == {"value": 7}
    assert process(proc("passthrough"), t) == {"value": 3}


@given(st.lists(st.one_of(st.none(), st.floats(-1e6, 1e6, allow_nan=False)), min_size=1, max_size=6))
def test_mean_skip_absent_oracle(vals):
    slots = {f"s{i}": ABSENT if v is None else (i, {"value": v}) for i, v in enumerate(vals)}
    got = process(proc("mean"), tup(**slots))
    present = [Fraction(v) for v in vals if v is not None]
    if not present:
        assert got is None
        return
    exact = sum(present) / len(present)
    assert abs(got["value"] - float(exact)) <= 1e-12 * max(1.0, abs(float(exact)))


def test_mean_matches_every_present_subset():
    vals = {"A": 1.25, "B": -3.5, "C": 8.0, "D": 1e-3}
    for r in range(1, 5):
        for present in combinations(vals, r):
            slots = {k: ((1, {"value": v}) if k in present else ABSENT) for k, v in vals.items()}
            expect = sum(Fraction(vals[k]) for k in present) / r
            assert process(proc("mean"), tup(**slots))["value"] == pytest.approx(float(expect), rel=1e-12)


# --- invariants vs. reference trace ------------------------------------------

def run_both(seed, policy, n_messages, n_sources, capacity=1024):
    rng = random.Random(seed)
    sources, events = random_stream(rng, n_messages, n_sources)
    fault = {"kind": policy, **({"max_wait_ticks": 3} if policy == "wait" else {})}
    st_ = state(sources, fault=fault, capacity=capacity)
    ref = RefAggregator(sources, policy, 3, capacity)
    taken = {s: [] for s in sources}
    seen = set()
    tick = 0
    for ev in events:
        if ev[0] == "msg":
            st_.consume(ev[1], ev[2], ts_consumed=tick)
            ref.consume(ev[1], ev[2])
        else:
            tick += 1
            got = st_.aggregate_tick(tick)
            want = ref.tick()
            got_keys = None if got is None else {
                k: (MISSING if v is ABSENT else (v.msg.source, v.msg.seq)) for k, v in got.slots.items()}
            assert got_keys == want
            if got is not None:
                assert list(got.slots) == list(sources)
                for sid, tm in got.present().items():
                    k = (tm.msg.ts_published, tm.msg.seq)
                    assert not taken[sid] or taken[sid][-1] < k
                    taken[sid].append(k)
                    assert (tm.msg.source, tm.msg.seq) not in seen
                    seen.add((tm.msg.source, tm.msg.seq))
        assert st_.conservation_holds()
    assert st_.counters["consumed"] == ref.consumed
    assert st_.counters["dropped_overflow"] == ref.overflow
    assert st_.counters["dropped_fault"] == ref.dropped
    assert st_.emitted == ref.emitted
    return st_


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(["proceed", "wait", "drop"]),
       st.integers(1, 5), st.sampled_from([4, 16, 1024]))
def test_aggregator_matches_reference(seed, policy, n_sources, capacity):
    run_both(seed, policy, 300, n_sources, capacity)


@given(st.integers(0, 2**32), st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_policies_equivalent_when_never_empty(seed, n):
    rng = random.Random(seed)
    sources = [f"s{i}" for i in range(n)]
    streams = {}
    for policy in ("proceed", "wait", "drop"):
        fault = {"kind": policy, **({"max_wait_ticks": 2} if policy == "wait" else {})}
        s = state(sources, fault=fault)
        r = random.Random(seed)
        for k in range(50):
            for src in sources:
                s.consume(src, Message(src, k, k * 10 + r.randint(0, 9), {"value": r.random()}))
        out = []
        for t in range(50):
            tup_ = s.aggregate_tick(t)
            out.append({k: (v.msg.source, v.msg.seq) for k, v in tup_.slots.items()})
        streams[policy] = out
    assert streams["proceed"] == streams["wait"] == streams["drop"]
    del rng
