import asyncio
import json

import pytest
from hypothesis import given, strategies as st

from vsm.monitor import HealthTable, MonitorServer, UnknownNode
from vsm.wire import encode_payload, request


def hb(vs, node="fog1", ts=0, interval=1000, **counters):
    return {"cmd": "heartbeat", "vs_id": vs, "node": node, "ts": ts,
            "interval_ms": interval, "counters": counters}


def test_ingest():
    t = HealthTable()
    rec = t.ingest(hb("vs1", ts=100, published=1))
    assert rec.status == "online" and rec.last_heartbeat_ts == 100
    t.ingest(hb("vs1", ts=200, published=2))
    assert t.records["vs1"].last_heartbeat_ts == 200 and t.records["vs1"].counters == {"published": 2}
    t.ingest(hb("vs1", ts=150))
    assert t.records["vs1"].last_heartbeat_ts == 200
    t.ingest(hb("vs7", node="fog9", ts=1))
    assert t.records["vs7"].node == "fog9"
    assert t.ingest({"cmd": "heartbeat", "vs_id": "x"}) is None
    assert t.ingest({"vs_id": "x", "node": "n", "ts": "soon"}) is None
    assert t.malformed == 2


def test_sweep_thresholds_and_recovery():
    t = HealthTable()
    t.ingest(hb("vs1", ts=0))
    assert t.sweep(1500) == [] and t.records["vs1"].status == "online"
    assert t.sweep(2000) == []
    [tr] = t.sweep(2500)
    assert (tr.vs_id, tr.new) == ("vs1", "offline")
    assert t.sweep(5000) == []
    t.ingest(hb("vs1", ts=5000))
    assert t.records["vs1"].status == "online"


def test_infer_node_offline():
    t = HealthTable()
    for i in range(3):
        t.ingest(hb(f"v{i}", ts=0))
    t.sweep(10_000)
    assert t.infer_node_offline("fog1")
    t.ingest(hb("v1", ts=10_000))
    assert not t.infer_node_offline("fog1")
    with pytest.raises(UnknownNode):
        t.infer_node_offline("nowhere")


@given(st.lists(st.tuples(st.sampled_from("abcd"), st.integers(0, 10_000)), min_size=1, max_size=30),
       st.integers(0, 20_000))
def test_heartbeating_never_offline_and_monotone(beats, now):
    t = HealthTable()
    for vs, ts in beats:
        t.ingest(hb(vs, ts=ts))
    t.sweep(now)
    for rec in t.records.values():
        assert (rec.status == "offline") == (now - rec.last_heartbeat_ts > 2000)
    before = t.infer_node_offline("fog1")
    t.ingest(hb("fresh", ts=now))
    assert t.infer_node_offline("fog1") is False
    assert before or not t.infer_node_offline("fog1")


def test_snapshot_round_trip(tmp_path):
    t = HealthTable()
    t.ingest(hb("vs1", ts=5, published=3))
    back = HealthTable.from_json(json.loads(json.dumps(t.to_json())))
    assert back.records["vs1"].counters == {"published": 3}
    assert back.records["vs1"].status == "offline"


def test_server_status_and_snapshot(tmp_path):
    async def main():
        snap = tmp_path / "health.json"
        mon = MonitorServer(sweep_ms=50, snapshot_path=snap, snapshot_every_ms=100)
        addr = await mon.start("127.0.0.1:0")
        host, port = addr.split(":")
        _, w = await asyncio.open_connection(host, int(port))
        w.write(encode_payload(hb("vs1", ts=1)) + encode_payload(hb("vs2", node="fog2", ts=1)))
        w.write(encode_payload({"cmd": "nonsense"}))
        await w.drain()
        w.close()
        await asyncio.sleep(0.2)
        reply = await request(addr, {"cmd": "status", "node": "fog1"})
        assert [r["vs_id"] for r in reply["records"]] == ["vs1"]
        assert reply["nodes"] == {"fog1": True}  # ts=1 is long past
        assert mon.table.malformed == 1
        await mon.close()
        assert json.loads(snap.read_text())["records"][0]["vs_id"] == "vs1"
    asyncio.run(main())
