"""Per-node interaction history with "last N neighbors strictly before t" queries."""

from __future__ import annotations

from bisect import bisect_left
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .ingest import Event


class OrderingError(Exception):
    pass


@dataclass(frozen=True)
class NeighborRecord:
    neighbor: int
    event_id: int
    timestamp: float


class TemporalAdjacency:
    """Undirected temporal adjacency: each interaction is visible from both
    endpoints, sorted by (timestamp, event_id)."""

    def __init__(self):
        self._lists: Dict[int, List[NeighborRecord]] = {}
        self._edge_features: Dict[int, np.ndarray] = {}

    def insert_interaction(self, event: Event) -> None:
        ts = event.timestamp
        for node, other in ((event.source, event.destination),
                            (event.destination, event.source)):
            lst = self._lists.setdefault(node, [])
            if lst and ts < lst[-1].timestamp:
                raise OrderingError(
                    f"out-of-order insertion for node {node}: "
                    f"t={ts} < last stored t={lst[-1].timestamp}"
                )
            lst.append(NeighborRecord(other, event.event_id, ts))
        self._edge_features[event.event_id] = np.asarray(event.features, dtype=np.float64)

    def insert_batch(self, batch) -> None:
        for ev in batch:
            self.insert_interaction(ev)

    def last_n_neighbors(self, node: int, t: float, n: int) -> List[NeighborRecord]:
        """The n most recent records strictly before t, most recent last."""
        if n < 1:
            raise ValueError("n must be >= 1")
        lst = self._lists.get(node)
        if not lst:
            return []
        # records are sorted by (timestamp, event_id); cut at timestamp < t
        hi = bisect_left(lst, t, key=lambda r: r.timestamp)
        return lst[max(0, hi - n):hi]

    def edge_features(self, event_id: int) -> np.ndarray:
        return self._edge_features[event_id]

    def degree(self, node: int) -> int:
        return len(self._lists.get(node, ()))

    def known_nodes(self) -> set:
        return set(self._lists)

    def records(self, node: int) -> List[NeighborRecord]:
        return list(self._lists.get(node, ()))

    # checkpoint support -------------------------------------------------
    def snapshot_arrays(self):
        """Flatten to arrays for serialization: records plus edge features."""
        rows = []
        for node in sorted(self._lists):
            for rec in self._lists[node]:
                rows.append((node, rec.neighbor, rec.event_id, rec.timestamp))
        rec_arr = np.array(rows, dtype=np.float64).reshape(len(rows), 4)
        eids = np.array(sorted(self._edge_features), dtype=np.float64)
        if len(eids):
            feats = np.stack([self._edge_features[int(e)] for e in eids])
        else:
            feats = np.zeros((0, 0))
        return rec_arr, eids, feats

    @classmethod
    def from_snapshot(cls, rec_arr: np.ndarray, eids: np.ndarray, feats: np.ndarray):
        adj = cls()
        for node, nbr, eid, ts in rec_arr:
            adj._lists.setdefault(int(node), []).append(
                NeighborRecord(int(nbr), int(eid), float(ts))
            )
        for i, e in enumerate(eids):
            adj._edge_features[int(e)] = feats[i].copy()
        return adj
