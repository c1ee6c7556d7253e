"""Exact K-nearest-neighbor search over initialized memory vectors: a
ball-tree index and a brute-force reference with identical tie-breaking."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .memory import MemoryTable


class SimilarityError(Exception):
    pass


@dataclass(frozen=True)
class SimilarityConfig:
    k: int = 1
    backend: str = "ball_tree"  # or "brute_force"
    leaf_capacity: int = 16
    rebuild_every: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise SimilarityError("k must be >= 1")
        if self.backend not in ("ball_tree", "brute_force"):
            raise SimilarityError(f"unknown backend: {self.backend}")
        if self.leaf_capacity < 1:
            raise SimilarityError("leaf_capacity must be >= 1")


def _row_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    # one fixed formulation so both backends produce bitwise-equal distances
    diff = points - query
    return np.sqrt((diff * diff).sum(axis=1))


class CandidateSet:
    """Initialized nodes with copies of their memory vectors."""

    def __init__(self, ids: np.ndarray, vectors: np.ndarray):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.vectors = np.asarray(vectors, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def query(
        self, query: np.ndarray, k: int, exclude: Optional[Set[int]] = None
    ) -> List[Tuple[int, float]]:
        """Brute-force exact KNN; ties broken by ascending node id."""
        exclude = exclude or set()
        dists = _row_distances(self.vectors, np.asarray(query, dtype=np.float64))
        keep = ~np.isin(self.ids, np.array(sorted(exclude), dtype=np.int64)) \
            if exclude else np.ones(len(self.ids), dtype=bool)
        ids = self.ids[keep]
        dists = dists[keep]
        order = np.lexsort((ids, dists))
        top = order[: min(k, len(order))]
        return [(int(ids[i]), float(dists[i])) for i in top]


def collect_candidates(mem: MemoryTable) -> CandidateSet:
    ids = mem.initialized_ids()
    return CandidateSet(ids, mem.states[ids].copy())


@dataclass
class _Ball:
    centroid: np.ndarray
    radius: float
    left: Optional["_Ball"] = None
    right: Optional["_Ball"] = None
    leaf: Optional[np.ndarray] = None  # positions into the point arrays

    @property
    def is_leaf(self) -> bool:
        return self.leaf is not None


class BallTree:
    """Binary ball hierarchy built with the two-poles split rule.

    Pole A is the point farthest from the set centroid, pole B the point
    farthest from A; points go to their nearer pole (ties to A). Queries
    prune a ball when distance(query, centroid) - radius exceeds the current
    k-th best distance.
    """

    def __init__(self, candidates: CandidateSet, leaf_capacity: int = 16):
        if len(candidates) == 0:
            raise SimilarityError("cannot build a ball tree over an empty set")
        self.ids = candidates.ids.copy()
        self.points = candidates.vectors.copy()
        self.leaf_capacity = int(leaf_capacity)
        self.root = self._build(np.arange(len(self.ids), dtype=np.int64))

    def _ball_of(self, positions: np.ndarray) -> _Ball:
        pts = self.points[positions]
        centroid = pts.mean(axis=0)
        radius = float(_row_distances(pts, centroid).max())
        return _Ball(centroid=centroid, radius=radius)

    def _build(self, positions: np.ndarray) -> _Ball:
        ball = self._ball_of(positions)
        if len(positions) <= self.leaf_capacity:
            ball.leaf = positions
            return ball
        pts = self.points[positions]
        a = int(np.argmax(_row_distances(pts, ball.centroid)))
        b = int(np.argmax(_row_distances(pts, pts[a])))
        da = _row_distances(pts, pts[a])
        db = _row_distances(pts, pts[b])
        to_a = da <= db  # ties to pole A
        if to_a.all() or not to_a.any():
            # degenerate split (e.g. all points identical): stop here
            ball.leaf = positions
            return ball
        ball.left = self._build(positions[to_a])
        ball.right = self._build(positions[~to_a])
        return ball

    def query(
        self, query: np.ndarray, k: int, exclude: Optional[Set[int]] = None
    ) -> List[Tuple[int, float]]:
        """Exact KNN with ball pruning; same ordering contract as brute force."""
        query = np.asarray(query, dtype=np.float64)
        exclude = exclude or set()
        # max-heap over (dist, id) via negation: worst candidate on top
        heap: List[Tuple[float, int]] = []

        def consider(positions: np.ndarray) -> None:
            for pos, dist in zip(
                positions, _row_distances(self.points[positions], query)
            ):
                node_id = int(self.ids[pos])
                if node_id in exclude:
                    continue
                item = (-float(dist), -node_id)
                if len(heap) < k:
                    heapq.heappush(heap, item)
                elif item > heap[0]:
                    heapq.heapreplace(heap, item)

        def visit(ball: _Ball) -> None:
            if len(heap) == k:
                lower_bound = float(np.linalg.norm(query - ball.centroid)) - ball.radius
                if lower_bound > -heap[0][0]:
                    return
            if ball.is_leaf:
                consider(ball.leaf)
                return
            dl = np.linalg.norm(query - ball.left.centroid)
            dr = np.linalg.norm(query - ball.right.centroid)
            first, second = (ball.left, ball.right) if dl <= dr else (ball.right, ball.left)
            visit(first)
            visit(second)

        visit(self.root)
        out = [(-nid, -nd) for nd, nid in heap]
        out.sort(key=lambda t: (t[1], t[0]))
        return [(int(nid), float(dist)) for nid, dist in out]

    # structural checks used by tests --------------------------------------
    def iter_balls(self):
        stack = [self.root]
        while stack:
            ball = stack.pop()
            yield ball
            if not ball.is_leaf:
                stack.extend((ball.left, ball.right))

    def member_positions(self, ball: _Ball) -> np.ndarray:
        if ball.is_leaf:
            return ball.leaf
        return np.concatenate(
            [self.member_positions(ball.left), self.member_positions(ball.right)]
        )

    def depth(self) -> int:
        def d(ball):
            return 1 if ball.is_leaf else 1 + max(d(ball.left), d(ball.right))

        return d(self.root)


Index = Union[BallTree, CandidateSet]


def build_index(candidates: CandidateSet, cfg: SimilarityConfig) -> Index:
    if cfg.backend == "ball_tree":
        return BallTree(candidates, leaf_capacity=cfg.leaf_capacity)
    return candidates


def build_ball_tree(candidates: CandidateSet, cfg: SimilarityConfig) -> BallTree:
    return BallTree(candidates, leaf_capacity=cfg.leaf_capacity)


def knn_query(
    index: Index, query: np.ndarray, k: int, exclude: Optional[Set[int]] = None
) -> List[Tuple[int, float]]:
    """k nearest candidates by Euclidean distance, ascending, ties by id;
    shorter when fewer than k candidates remain after exclusion."""
    return index.query(query, k, exclude)
