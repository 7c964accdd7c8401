from __future__ import annotations

import copy
import socket

import pytest

from vsm.config import config_from_dict

BASE_DOC = {
    "id": "vs1",
    "node": "fog1",
    "inputs": [],
    "read_rate_ms": 1000,
    "fault_policy": {"kind": "proceed"},
    "processor": {"fn": "passthrough"},
    "monitor": {"interval_ms": 5000, "endpoint": "c:9000"},
}


def make_doc(**overrides):
    doc = copy.deepcopy(BASE_DOC)
    doc.update(overrides)
    return doc


def virtual(source_id, addr="127.0.0.1:5672"):
    return {"kind": "virtual", "source_id": source_id, "broker_addr": addr}


def sim_input(source_id, value=1.0, rate_ms=100, waveform="constant", seed=0):
    return {"kind": "physical", "source_id": source_id,
            "adapter": {"kind": "sim", "params": {"rate_ms": rate_ms, "waveform": waveform,
                                                  "amplitude": value, "seed": seed}}}


def make_config(**overrides):
    return config_from_dict(make_doc(**overrides))


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def port():
    return free_port()


# --- acceptance reporting ------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")
