from __future__ import annotations

import math
import operator
from typing import Any, Callable

from ..config import ProcessorSpec
from .state import ABSENT, AggregatedTuple, TimedMessage


class TypeMismatch(TypeError):
    pass


_OPS: dict[str, Callable[[float, float], bool]] = {
    "gt": operator.gt, "lt": operator.lt, "ge": operator.ge, "le": operator.le,
}


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _numeric(spec: ProcessorSpec, present: dict[str, TimedMessage]) -> list[float]:
    # slots without the field, or with an explicit null, contribute nothing
    xs = []
    for sid, tm in present.items():
        if spec.field not in tm.msg.values:
            continue
        v = tm.msg.values[spec.field]
        if v is None:
            continue
        if not _is_number(v):
            raise TypeMismatch(f"{sid}.{spec.field} is {type(v).__name__}, not a number")
        xs.append(v)
    return xs


def _latest(present: dict[str, TimedMessage]) -> TimedMessage:
    return max(present.values(), key=lambda tm: tm.order_key)


def process(spec: ProcessorSpec, tup: AggregatedTuple) -> dict[str, Any] | None:
    """Reduce one aggregated tuple to an output values map, or None for no output.

    Aggregates (mean, sum, min, max, count) read ``spec.field`` from every
    present slot and emit ``{spec.field: result}``. ``last`` and
    multi-input ``passthrough`` forward the values of the newest slot.
    ``threshold`` forwards a single-input slot unchanged; with several
    inputs it emits ``{source_id: field_value}`` for each passing slot.
    """
    present = tup.present()
    fn = spec.fn
    if fn in ("mean", "sum", "min", "max", "count"):
        xs = _numeric(spec, present)
        if not xs:
            return None
        if fn == "mean":
            result: float | int = math.fsum(xs) / len(xs)
        elif fn == "sum":
            result = math.fsum(xs) if any(isinstance(x, float) for x in xs) else sum(xs)
        elif fn == "min":
            result = min(xs)
        elif fn == "max":
            result = max(xs)
        else:
            result = len(xs)
        return {spec.field: result}

    if not present:
        return None
    if fn == "passthrough":
        if len(tup.slots) == 1:
            return dict(next(iter(present.values())).msg.values)
        return dict(_latest(present).msg.values)
    if fn == "last":
        return dict(_latest(present).msg.values)
    if fn == "threshold":
        test = _OPS[spec.params["op"]]
        limit = spec.params["limit"]
        passing = {}
        for sid, tm in present.items():
            v = tm.msg.values.get(spec.field)
            if v is None:
                continue
            if not _is_number(v):
                raise TypeMismatch(f"{sid}.{spec.field} is {type(v).__name__}, not a number")
            if test(v, limit):
                passing[sid] = tm
        if not passing:
            return None
        if len(tup.slots) == 1:
            return dict(next(iter(passing.values())).msg.values)
        return {sid: tm.msg.values[spec.field] for sid, tm in passing.items()}
    raise ValueError(f"unknown processor {fn!r}")


__all__ = ["ABSENT", "TypeMismatch", "process"]
