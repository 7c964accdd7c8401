from __future__ import annotations

import statistics
from dataclasses import asdict, dataclass
from typing import Sequence

TREND_SLACK = 0.05


class EmptySeries(ValueError):
    pass


@dataclass(frozen=True)
class SummaryRow:
    label: str
    min: float
    max: float
    average: float
    median: float
    sd: float

    def as_dict(self) -> dict[str, float | str]:
        return asdict(self)


def summarize(samples: Sequence[float], label: str = "") -> SummaryRow:
    """Min, max, mean, median and population standard deviation."""
    xs = [float(x) for x in samples]
    if not xs:
        raise EmptySeries(label or "empty series")
    return SummaryRow(
        label=label,
        min=min(xs),
        max=max(xs),
        average=statistics.fmean(xs),
        median=statistics.median(xs),
        sd=statistics.pstdev(xs),
    )


@dataclass(frozen=True)
class TrendVerdict:
    monotone_nondecreasing: bool
    by: str
    values: tuple[float, ...]
    violation: tuple[int, int] | None = None  # 1-based positions of the first failing pair

    def as_dict(self) -> dict[str, object]:
        return {"monotone_nondecreasing": self.monotone_nondecreasing, "by": self.by,
                "values": list(self.values),
                "violation": list(self.violation) if self.violation else None}


def compare_trend(rows: Sequence[SummaryRow], by: str = "average",
                  slack: float = TREND_SLACK) -> TrendVerdict:
    """Is ``by`` non-decreasing along ``rows``, allowing each step to fall by ``slack`` (relative)?"""
    values = tuple(float(getattr(r, by)) for r in rows)
    for i in range(1, len(values)):
        prev, cur = values[i - 1], values[i]
        if cur < prev - slack * abs(prev):
            return TrendVerdict(False, by, values, (i, i + 1))
    return TrendVerdict(True, by, values)
