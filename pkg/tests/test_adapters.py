import asyncio
import json

import pytest

from vsm.adapters import BindError, FileError, ParseError, adapter_open, parse_line, waveform_values
from vsm.config import AdapterSpec
from vsm.storage import persist
from vsm.wire import Message

from conftest import free_port


async def collect(adapter, seconds):
    out = []

    async def run():
        async for m in adapter:
            out.append(m)

    task = asyncio.create_task(run())
    await asyncio.sleep(seconds)
    await adapter.close()
    task.cancel()
    await asyncio.gather(task, return_exceptions=True)
    return out


def test_parse_line():
    assert parse_line(" 3.14 ") == 3.14
    assert parse_line("1e3") == 1000.0
    for bad in ("abc", "", "nan", "inf"):
        with pytest.raises(ParseError):
            parse_line(bad)


def test_sim_constant_rate():
    async def main():
        a = await adapter_open(AdapterSpec("sim", {"rate_ms": 100, "waveform": "constant",
                                                   "amplitude": 5, "seed": 0}), "p1")
        return await collect(a, 1.05)
    msgs = asyncio.run(main())
    assert len(msgs) == 10
    assert all(m.values == {"value": 5} and m.source == "p1" for m in msgs)
    assert [m.seq for m in msgs] == list(range(10))
    assert all(a.ts_published <= b.ts_published for a, b in zip(msgs, msgs[1:]))


def test_sim_seed_determinism():
    params = {"waveform": "random_uniform", "amplitude": 10.0, "seed": 42}
    take = lambda: [v for _, v in zip(range(50), waveform_values(params))]
    assert take() == take()
    assert take() != [v for _, v in zip(range(50), waveform_values({**params, "seed": 43}))]
    assert all(0 <= v <= 10 for v in take())


def test_waveforms():
    ramp = list(zip(range(5), waveform_values({"waveform": "ramp", "amplitude": 4, "period": 4})))
    assert [v for _, v in ramp] == [0, 1, 2, 3, 0]
    sine = [v for _, v in zip(range(4), waveform_values({"waveform": "sine", "amplitude": 2, "period": 4}))]
    assert sine == pytest.approx([0, 2, 0, -2], abs=1e-12)


def test_tcp_line():
    async def main():
        port = free_port()
        a = await adapter_open(AdapterSpec("tcp_line", {"listen_addr": f"127.0.0.1:{port}"}), "t1")
        got = []

        async def run():
            async for m in a:
                got.append(m)

        task = asyncio.create_task(run())
        _, w = await asyncio.open_connection("127.0.0.1", port)
        w.write(b"17.5\nabc\n 2e1 \n")
        await w.drain()
        w.close()
        for _ in range(100):
            if len(got) == 2:
                break
            await asyncio.sleep(0.01)
        with pytest.raises(BindError):
            await adapter_open(AdapterSpec("tcp_line", {"listen_addr": f"127.0.0.1:{port}"}), "t2")
        await a.close()
        await asyncio.wait_for(task, 1)
        return got, a.parse_errors
    got, errors = asyncio.run(main())
    assert [m.values["value"] for m in got] == [17.5, 20.0]
    assert errors == 1


def test_file_replay(tmp_path):
    path = tmp_path / "rec.log"
    for k, ts in enumerate([1000, 1100, 1100, 1300]):
        persist(path, Message("x", k, ts, {"value": float(k)}))
    with open(path, "a") as fh:
        fh.write("garbage\n")

    async def main():
        a = await adapter_open(AdapterSpec("file_replay", {"path": str(path), "speedup": 10}), "r")
        loop = asyncio.get_running_loop()
        t0 = loop.time()
        got = [m async for m in a]
        return got, loop.time() - t0, a.parse_errors
    got, elapsed, errors = asyncio.run(main())
    assert [m.values["value"] for m in got] == [0.0, 1.0, 2.0, 3.0]
    assert [m.seq for m in got] == [0, 1, 2, 3]
    assert 0.025 <= elapsed < 0.3  # 300 ms of gaps at 10x
    assert errors == 1

    with pytest.raises(FileError):
        asyncio.run(adapter_open(AdapterSpec("file_replay", {"path": str(tmp_path / "nope"), "speedup": 1}), "r"))
