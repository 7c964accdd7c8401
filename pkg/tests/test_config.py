import json
import string

import pytest
from hypothesis import given, settings, strategies as st

from vsm.config import (
    ConfigSyntaxError,
    FaultPolicy,
    IdMismatch,
    InputSpec,
    MonitorSpec,
    ProcessorSpec,
    SchemaError,
    StorageSpec,
    VSConfig,
    diff_config,
    parse_config,
    serialize_config,
    validate_config,
    with_inputs,
)

from conftest import make_config, make_doc, sim_input, virtual


def test_minimal_document_defaults_output_topic():
    cfg = parse_config(json.dumps(make_doc()).encode())
    assert cfg.output_topic == "vs1"
    assert cfg.processor.field == "value"
    assert cfg.storage == StorageSpec(False, None)
    assert validate_config(cfg, set()) == []


def test_missing_read_rate_names_field():
    doc = make_doc()
    del doc["read_rate_ms"]
    with pytest.raises(SchemaError) as exc:
        parse_config(json.dumps(doc))
    assert exc.value.field == "read_rate_ms"


def test_wait_without_max_ticks():
    with pytest.raises(SchemaError) as exc:
        parse_config(json.dumps(make_doc(fault_policy={"kind": "wait"})))
    assert exc.value.field == "max_wait_ticks"


def test_malformed_text():
    with pytest.raises(ConfigSyntaxError):
        parse_config(b"{not json")
    with pytest.raises(ConfigSyntaxError):
        parse_config(b"[1, 2]")


def test_unknown_top_level_field_rejected():
    with pytest.raises(SchemaError) as exc:
        parse_config(json.dumps(make_doc(read_rate=5)))
    assert exc.value.field == "read_rate"


def test_conditional_requirements():
    with pytest.raises(SchemaError):
        parse_config(json.dumps(make_doc(inputs=[{"kind": "virtual", "source_id": "a"}])))
    with pytest.raises(SchemaError):
        parse_config(json.dumps(make_doc(inputs=[{"kind": "physical", "source_id": "a"}])))
    with pytest.raises(SchemaError):
        parse_config(json.dumps(make_doc(processor={"fn": "threshold", "params": {"op": "gt"}})))
    with pytest.raises(SchemaError):
        parse_config(json.dumps(make_doc(storage={"enabled": True})))
    with pytest.raises(SchemaError):
        parse_config(json.dumps(make_doc(read_rate_ms=True)))


def test_self_loop_violation():
    cfg = make_config(inputs=[virtual("vs1")])
    assert "self-loop" in validate_config(cfg, set())


def test_duplicate_id_violation():
    assert "duplicate id" in validate_config(make_config(), {"vs1"})


def test_other_violations():
    cfg = make_config(inputs=[virtual("a"), virtual("a")], read_rate_ms=0,
                      monitor={"interval_ms": 50, "endpoint": "nohost"})
    v = validate_config(cfg, set())
    assert "duplicate input id 'a'" in v
    assert "read_rate_ms must be >= 1" in v
    assert any("monitor.interval_ms" in x for x in v)
    assert any("monitor.endpoint" in x for x in v)
    bad_sim = make_config(inputs=[{"kind": "physical", "source_id": "p",
                                   "adapter": {"kind": "sim", "params": {"rate_ms": 0}}}])
    assert any("rate_ms" in x for x in validate_config(bad_sim, set()))


def test_diff_examples():
    old = make_config(inputs=[virtual("a"), virtual("b")])
    new = make_config(inputs=[virtual("b"), virtual("c")])
    d = diff_config(old, new)
    assert [i.source_id for i in d.added_inputs] == ["c"]
    assert [i.source_id for i in d.removed_inputs] == ["a"]
    assert d.changed_scalars == frozenset()
    assert diff_config(old, old).empty
    faster = make_config(inputs=[virtual("a"), virtual("b")], read_rate_ms=500)
    assert diff_config(old, faster).changed_scalars == {"read_rate_ms"}
    with pytest.raises(IdMismatch):
        diff_config(old, make_config(id="other"))


# --- properties -------------------------------------------------------------

ident = st.text(string.ascii_lowercase + string.digits + "_-", min_size=1, max_size=8)
addr = st.builds(lambda h, p: f"{h}:{p}", st.sampled_from(["127.0.0.1", "fog2", "c"]),
                 st.integers(1, 65535))
scalar = st.one_of(st.integers(-1000, 1000), st.floats(-1e6, 1e6, allow_nan=False), st.booleans(),
                   st.text(string.ascii_letters, max_size=5))


@st.composite
def input_specs(draw, source_id):
    if draw(st.booleans()):
        return InputSpec("virtual", source_id, broker_addr=draw(addr))
    from vsm.config import AdapterSpec
    kind = draw(st.sampled_from(["sim", "tcp_line", "file_replay"]))
    if kind == "sim":
        params = {"rate_ms": draw(st.integers(1, 10_000)),
                  "waveform": draw(st.sampled_from(["constant", "ramp", "sine", "random_uniform"])),
                  "amplitude": draw(st.floats(-100, 100, allow_nan=False)),
                  "seed": draw(st.integers(0, 2**31))}
    elif kind == "tcp_line":
        params = {"listen_addr": draw(addr)}
    else:
        params = {"path": "/tmp/" + draw(ident), "speedup": draw(st.floats(0.1, 100))}
    return InputSpec("physical", source_id, adapter=AdapterSpec(kind, params))


@st.composite
def valid_configs(draw):
    vs_id = draw(ident)
    sources = draw(st.lists(ident.filter(lambda s: s != vs_id), max_size=5, unique=True))
    inputs = tuple(draw(input_specs(s)) for s in sources)
    fkind = draw(st.sampled_from(["wait", "proceed", "drop"]))
    fault = FaultPolicy(fkind, draw(st.integers(1, 50)) if fkind == "wait" else None)
    fn = draw(st.sampled_from(["passthrough", "mean", "sum", "min", "max", "count", "last", "threshold"]))
    params = draw(st.dictionaries(ident, scalar, max_size=3))
    if fn == "threshold":
        params.update(op=draw(st.sampled_from(["gt", "lt", "ge", "le"])),
                      limit=draw(st.floats(-100, 100, allow_nan=False)))
    storage = StorageSpec(True, "/tmp/" + draw(ident)) if draw(st.booleans()) else StorageSpec()
    return VSConfig(
        id=vs_id, node=draw(ident), inputs=inputs, read_rate_ms=draw(st.integers(1, 100_000)),
        fault_policy=fault, processor=ProcessorSpec(fn, draw(ident), params),
        monitor=MonitorSpec(draw(st.integers(100, 60_000)), draw(addr)), storage=storage,
        output_topic=draw(st.one_of(st.just(""), ident)),
    )


@settings(max_examples=200)
@given(valid_configs())
def test_round_trip_and_valid(cfg):
    assert parse_config(serialize_config(cfg)) == cfg
    assert validate_config(cfg, set()) == []
    assert diff_config(cfg, cfg).empty


@settings(max_examples=200)
@given(valid_configs(), valid_configs())
def test_diff_reconstructs_input_set(a, b):
    b = VSConfig(**{**b.__dict__, "id": a.id})
    d = diff_config(a, b)
    ids = (set(a.input_ids) - {i.source_id for i in d.removed_inputs}) | {i.source_id for i in d.added_inputs}
    assert ids == set(b.input_ids)
    assert not {i.source_id for i in d.added_inputs} & {i.source_id for i in d.removed_inputs}


@settings(max_examples=200)
@given(valid_configs(), st.sampled_from(["self", "dup_input", "rate", "interval", "dup_id", "storage"]))
def test_each_broken_invariant_is_reported(cfg, breakage):
    existing = set()
    if breakage == "self":
        cfg = with_inputs(cfg, list(cfg.inputs) + [InputSpec("virtual", cfg.id, broker_addr="h:1")])
    elif breakage == "dup_input":
        dup = InputSpec("virtual", "x", broker_addr="h:1")
        cfg = with_inputs(cfg, [i for i in cfg.inputs if i.source_id != "x"] + [dup, dup])
    elif breakage == "rate":
        cfg = VSConfig(**{**cfg.__dict__, "read_rate_ms": 0})
    elif breakage == "interval":
        cfg = VSConfig(**{**cfg.__dict__, "monitor": MonitorSpec(99, "h:1")})
    elif breakage == "storage":
        cfg = VSConfig(**{**cfg.__dict__, "storage": StorageSpec(True, "")})
    else:
        existing = {cfg.id}
    assert validate_config(cfg, existing)


def test_sim_input_helper_is_valid():
    assert validate_config(make_config(inputs=[sim_input("p")]), set()) == []
