from .stats import EmptySeries, SummaryRow, TrendVerdict, compare_trend, summarize
from .topology import ScenarioSpec, ShapeError, Topology, generate_topology

__all__ = [
    "EmptySeries", "ScenarioSpec", "ShapeError", "SummaryRow", "Topology", "TrendVerdict",
    "compare_trend", "generate_topology", "summarize",
]
