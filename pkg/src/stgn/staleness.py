"""Per-batch relative staleness: event-time differences, the empirical
quantile threshold, and the stale-node set."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Set

import numpy as np

from .ingest import EventStream
from .memory import NEVER, MemoryTable


class StalenessError(Exception):
    pass


@dataclass(frozen=True)
class StalenessConfig:
    alpha: float = 0.025
    apply_to: str = "sources_only"  # or "all_endpoints"
    enabled: bool = True

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise StalenessError("alpha must lie in (0,1)")
        if self.apply_to not in ("sources_only", "all_endpoints"):
            raise StalenessError(f"unknown apply_to: {self.apply_to}")

    @property
    def p(self) -> float:
        return 1.0 - self.alpha


@dataclass
class StalenessReport:
    deltas: Dict[int, float]
    threshold: float
    stale_set: Set[int] = field(default_factory=set)


def event_time_deltas(
    batch: EventStream, mem: MemoryTable, cfg: StalenessConfig
) -> Dict[int, float]:
    """Time since last memory update, anchored to each node's first event in
    the batch. Never-updated nodes are excluded: they are new, not stale."""
    deltas: Dict[int, float] = {}
    if cfg.apply_to == "sources_only":
        pairs = zip(batch.sources.tolist(), batch.timestamps.tolist())
    else:
        nodes = np.concatenate([batch.sources, batch.destinations])
        times = np.concatenate([batch.timestamps, batch.timestamps])
        order = np.argsort(times, kind="stable")
        pairs = zip(nodes[order].tolist(), times[order].tolist())
    for node, t in pairs:
        if node in deltas:
            continue
        last = mem.last_update[node]
        if last == NEVER:
            continue
        dt = t - last
        if dt < 0:
            raise StalenessError(
                f"memory of node {node} (t={last}) is ahead of batch event (t={t})"
            )
        deltas[node] = dt
    return deltas


def quantile_threshold(deltas: Iterable[float], p: float) -> float:
    """Empirical lower quantile: the rank-ceil(p*n) order statistic (1-based),
    no interpolation. Always an element of the input."""
    values = np.sort(np.asarray(list(deltas), dtype=np.float64))
    n = len(values)
    if n == 0:
        raise StalenessError("cannot take a quantile of an empty collection")
    if not (0.0 < p < 1.0):
        raise StalenessError("p must lie in (0,1)")
    rank = int(math.ceil(p * n - 1e-9))
    rank = max(1, min(n, rank))
    return float(values[rank - 1])


def stale_nodes(deltas: Dict[int, float], threshold: float) -> Set[int]:
    """Nodes whose delta is at or above the threshold (inclusive)."""
    return {node for node, dt in deltas.items() if dt >= threshold}


def compute_report(
    batch: EventStream, mem: MemoryTable, cfg: StalenessConfig
) -> Optional[StalenessReport]:
    """Full per-batch staleness report; None when staleness is disabled or
    no node in scope has history yet."""
    if not cfg.enabled:
        return None
    deltas = event_time_deltas(batch, mem, cfg)
    if not deltas:
        return None
    threshold = quantile_threshold(deltas.values(), cfg.p)
    return StalenessReport(
        deltas=deltas, threshold=threshold, stale_set=stale_nodes(deltas, threshold)
    )


def format_debug_line(batch_index: int, report: Optional[StalenessReport]) -> str:
    """One line per batch for the opt-in staleness debug log."""
    if report is None:
        return f"batch={batch_index} n=0 threshold=nan stale=0"
    return (
        f"batch={batch_index} n={len(report.deltas)} "
        f"threshold={report.threshold!r} stale={len(report.stale_set)}"
    )
