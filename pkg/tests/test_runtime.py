import asyncio
import json

import pytest

from vsm.broker import Broker
from vsm.config import config_from_dict
from vsm.monitor import HealthTable, MonitorServer
from vsm.runtime import BrokerLinks, HeartbeatEmitter, Publisher, VirtualSensor
from vsm.storage import DataManager, log_path, persist, read_range
from vsm.wire import Message

from conftest import free_port, make_doc, sim_input, virtual


def test_publisher_buffers_in_order_across_disconnect():
    async def main():
        delivered = []
        up = {"ok": True}

        async def send(topic, msg):
            if not up["ok"]:
                raise ConnectionError("broker down")
            delivered.append(msg.seq)

        pub = Publisher(send, backoff_base=0.01)
        await pub.publish("t", Message("v", 0, 0, {}))
        up["ok"] = False
        assert not await pub.publish("t", Message("v", 1, 1, {}))
        up["ok"] = True
        # a newer message must queue behind the buffered one
        assert not await pub.publish("t", Message("v", 2, 2, {}))
        for _ in range(100):
            if not pub.buffer:
                break
            await asyncio.sleep(0.01)
        assert delivered == [0, 1, 2]
        await pub.close()
    asyncio.run(main())


def test_publisher_buffer_bound():
    async def main():
        async def send(topic, msg):
            raise ConnectionError("down")
        pub = Publisher(send, capacity=256, backoff_base=10)
        for i in range(300):
            await pub.publish("t", Message("v", i, i, {}))
        assert len(pub.buffer) == 256 and pub.dropped == 44
        assert pub.buffer[0][1].seq == 44
        await pub.close()
    asyncio.run(main())


def test_persist_and_read_range(tmp_path):
    path = tmp_path / "vs1.log"
    m1, m2 = Message("vs1", 0, 100, {"value": 1}), Message("vs1", 1, 200, {"value": 2})
    persist(path, m1)
    persist(path, m2)
    assert read_range(path, 0, 1000) == ([m1, m2], 0)
    assert read_range(path, 150, 250) == ([m2], 0)
    assert read_range(path, 0, 50) == ([], 0)
    with open(path, "a") as fh:
        fh.write('{"source": "vs1", "seq": 2, "ts_pub')
    assert read_range(path, 0, 1000) == ([m1, m2], 1)


def test_data_manager_counts_errors(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    dm = DataManager(blocker / "sub", "vs1")  # parent is a regular file
    assert not dm.persist(Message("vs1", 0, 0, {}))
    assert dm.errors >= 1
    ok = DataManager(tmp_path, "vs2")
    assert ok.persist(Message("vs2", 0, 0, {"value": 1}))
    ok.close()
    assert log_path(tmp_path, "vs2").read_text().count("\n") == 1


def test_heartbeat_timer_and_snapshot():
    async def main():
        table = HealthTable()
        mon = MonitorServer(table)
        addr = await mon.start("127.0.0.1:0")
        counters = {"consumed": 0, "published": 0}
        hb = HeartbeatEmitter("vs1", "fog1", addr, 1000, lambda: dict(counters))
        hb.start()
        await asyncio.sleep(0.5)
        counters["published"] = 7
        await asyncio.sleep(3.0)
        await hb.stop()
        assert hb.sent == 3
        await asyncio.sleep(0.05)
        rec = table.records["vs1"]
        assert rec.status == "online"
        assert rec.counters == {"consumed": 0, "published": 7}
        await mon.close()
    asyncio.run(main())


def test_sensor_survives_unreachable_monitor():
    async def main():
        broker = Broker()
        links = BrokerLinks(broker, "127.0.0.1:1")
        cfg = config_from_dict(make_doc(
            inputs=[sim_input("p", value=7, rate_ms=20)],
            monitor={"interval_ms": 100, "endpoint": f"127.0.0.1:{free_port()}"}))
        out = broker.subscribe("vs1", "probe")
        vs = VirtualSensor(cfg, links)
        await vs.start()
        await asyncio.sleep(0.5)
        await vs.stop()
        msgs = out.drain_nowait()
        assert len(msgs) >= 10
        assert all(m.values == {"value": 7} for m in msgs)
        assert [m.seq for m in msgs] == list(range(len(msgs)))
        assert vs.heartbeat.failed >= 3 and vs.heartbeat.sent == 0
    asyncio.run(main())


def test_sensor_tick_pipeline_with_storage(tmp_path):
    async def main():
        broker = Broker()
        links = BrokerLinks(broker, "127.0.0.1:5672")
        cfg = config_from_dict(make_doc(
            id="agg", inputs=[virtual("a", "127.0.0.1:5672"), virtual("b", "127.0.0.1:5672")],
            read_rate_ms=50, fault_policy={"kind": "drop"}, processor={"fn": "mean"},
            storage={"enabled": True, "path": str(tmp_path)}))
        vs = VirtualSensor(cfg, links)
        out = broker.subscribe("agg", "probe")
        await vs.start()
        assert broker.subscriptions("agg") == [("a", "agg"), ("b", "agg")]
        for k in range(5):
            broker.publish("a", Message("a", k, k, {"value": 2.0}))
            broker.publish("b", Message("b", k, k, {"value": 6.0}))
        await asyncio.sleep(0.6)
        await vs.stop()
        assert broker.subscriptions("agg") == []
        msgs = out.drain_nowait()
        assert [m.values["value"] for m in msgs] == [4.0] * 5
        stored, skipped = read_range(log_path(tmp_path, "agg"), 0, 2**62)
        assert stored == msgs and skipped == 0
        c = vs.counters()
        assert c["consumed"] == 10 and c["published"] == 5
    asyncio.run(main())
