"""Interaction-stream ingestion: JODIE CSV parsing, synthetic generation,
chronological splitting, and batching.

Node ids are globally unique: sources occupy [0, num_sources) and
destinations are offset to [num_sources, num_sources + num_destinations).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np


class ParseError(Exception):
    pass


class ValidationError(Exception):
    pass


class SplitError(Exception):
    pass


class GenerationError(Exception):
    pass


@dataclass(frozen=True)
class Event:
    """One time-stamped source -> destination interaction."""

    event_id: int
    source: int
    destination: int
    timestamp: float
    features: np.ndarray


class EventStream:
    """Chronologically ordered interaction events over a bipartite id space."""

    def __init__(
        self,
        sources: np.ndarray,
        destinations: np.ndarray,
        timestamps: np.ndarray,
        features: np.ndarray,
        num_sources: int,
        num_destinations: int,
        event_ids: Optional[np.ndarray] = None,
        validate: bool = True,
    ):
        self.sources = np.asarray(sources, dtype=np.int64)
        self.destinations = np.asarray(destinations, dtype=np.int64)
        self.timestamps = np.asarray(timestamps, dtype=np.float64)
        self.features = np.asarray(features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(len(self.sources), -1)
        self.num_sources = int(num_sources)
        self.num_destinations = int(num_destinations)
        if event_ids is None:
            event_ids = np.arange(len(self.sources), dtype=np.int64)
        self.event_ids = np.asarray(event_ids, dtype=np.int64)
        if validate:
            self._validate()

    def _validate(self) -> None:
        m = len(self.sources)
        if not (len(self.destinations) == len(self.timestamps) == len(self.event_ids) == m):
            raise ValidationError("field lengths disagree")
        if self.features.shape[0] != m:
            raise ValidationError("feature row count disagrees with event count")
        if m == 0:
            return
        if np.any(np.diff(self.timestamps) < 0):
            raise ValidationError("timestamps decrease within the stream")
        if np.any(self.timestamps < 0):
            raise ValidationError("negative timestamp")
        if np.any(np.diff(self.event_ids) <= 0) and m > 1:
            raise ValidationError("event ids must strictly increase")
        if self.sources.min() < 0 or self.sources.max() >= self.num_sources:
            raise ValidationError("source id out of range")
        lo, hi = self.num_sources, self.num_sources + self.num_destinations
        if self.destinations.min() < lo or self.destinations.max() >= hi:
            raise ValidationError("destination id out of range")

    @property
    def d_edge(self) -> int:
        return self.features.shape[1]

    @property
    def num_nodes(self) -> int:
        return self.num_sources + self.num_destinations

    def __len__(self) -> int:
        return len(self.sources)

    def event(self, i: int) -> Event:
        return Event(
            event_id=int(self.event_ids[i]),
            source=int(self.sources[i]),
            destination=int(self.destinations[i]),
            timestamp=float(self.timestamps[i]),
            features=self.features[i],
        )

    def __iter__(self) -> Iterator[Event]:
        return (self.event(i) for i in range(len(self)))

    @property
    def events(self) -> List[Event]:
        return list(self)

    def slice(self, lo: int, hi: int) -> "EventStream":
        return EventStream(
            self.sources[lo:hi],
            self.destinations[lo:hi],
            self.timestamps[lo:hi],
            self.features[lo:hi],
            self.num_sources,
            self.num_destinations,
            event_ids=self.event_ids[lo:hi],
            validate=False,
        )

    def select(self, mask: np.ndarray) -> "EventStream":
        return EventStream(
            self.sources[mask],
            self.destinations[mask],
            self.timestamps[mask],
            self.features[mask],
            self.num_sources,
            self.num_destinations,
            event_ids=self.event_ids[mask],
            validate=False,
        )

    def node_set(self) -> set:
        return set(self.sources.tolist()) | set(self.destinations.tolist())


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.70
    val_frac: float = 0.15
    new_node_frac: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.train_frac < 1 and 0 < self.val_frac < 1):
            raise ValidationError("fractions must lie in (0,1)")
        if self.train_frac + self.val_frac >= 1:
            raise ValidationError("train_frac + val_frac must be < 1")
        if not (0 <= self.new_node_frac <= 0.5):
            raise ValidationError("new_node_frac must lie in [0, 0.5]")


@dataclass
class SplitResult:
    train: EventStream
    val: EventStream
    test: EventStream
    new_nodes: frozenset
    val_inductive_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    test_inductive_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))


def parse_jodie_csv(path) -> EventStream:
    """Parse `source,destination,timestamp,state_label,f_1,...` with a header row.

    The state_label column is read and discarded. Destination ids are offset
    by the number of sources so the two id spaces are disjoint.
    """
    sources, destinations, timestamps, feats = [], [], [], []
    d_edge = None
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise ParseError(f"{path}: empty file")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) < 4:
                raise ParseError(f"{path}: line {lineno}: expected at least 4 columns")
            try:
                src = int(float(cells[0]))
                dst = int(float(cells[1]))
                ts = float(cells[2])
                float(cells[3])  # state_label: parsed, then discarded
                row = [float(c) for c in cells[4:]]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: non-numeric field ({exc})") from None
            if d_edge is None:
                d_edge = len(row)
            elif len(row) != d_edge:
                raise ParseError(f"{path}: line {lineno}: expected {d_edge + 4} columns")
            if timestamps and ts < timestamps[-1]:
                raise ValidationError(f"{path}: line {lineno}: decreasing timestamp")
            sources.append(src)
            destinations.append(dst)
            timestamps.append(ts)
            feats.append(row)
    if not sources:
        raise ParseError(f"{path}: no data rows")
    num_sources = max(sources) + 1
    num_destinations = max(destinations) + 1
    return EventStream(
        np.array(sources),
        np.array(destinations) + num_sources,
        np.array(timestamps),
        np.array(feats, dtype=np.float64).reshape(len(sources), d_edge),
        num_sources,
        num_destinations,
    )


def write_jodie_csv(stream: EventStream, path) -> None:
    """Inverse of parse_jodie_csv (state_label written as 0)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        feat_names = ",".join(f"f_{j + 1}" for j in range(stream.d_edge))
        header = "source,destination,timestamp,state_label"
        fh.write(header + ("," + feat_names if feat_names else "") + "\n")
        for ev in stream:
            cells = [
                str(ev.source),
                str(ev.destination - stream.num_sources),
                repr(ev.timestamp),
                "0",
            ]
            cells.extend(repr(float(x)) for x in ev.features)
            fh.write(",".join(cells) + "\n")


def generate_synthetic(
    num_users: int,
    num_items: int,
    num_communities: int,
    num_events: int,
    intra_prob: float = 0.9,
    dormancy: Optional[Sequence[Tuple[int, float, float]]] = None,
    seed: int = 0,
) -> EventStream:
    """Community-structured interaction stream with optional user dormancy.

    Users and items are split evenly into communities; each event picks an
    active user uniformly, then an item from the user's community with
    probability intra_prob (uniform over other communities otherwise).
    Inter-event gaps are exponential with unit rate. Edge features are the
    one-hot of the item's community plus Gaussian noise.
    """
    if num_users % num_communities or num_items % num_communities:
        raise GenerationError("num_communities must divide num_users and num_items")
    if not (0.0 <= intra_prob <= 1.0):
        raise GenerationError("intra_prob must lie in [0,1]")
    dormancy = list(dormancy or [])
    rng = np.random.default_rng(seed)
    users_per = num_users // num_communities
    items_per = num_items // num_communities
    user_comm = np.arange(num_users) // users_per
    item_comm = np.arange(num_items) // items_per

    sources = np.empty(num_events, dtype=np.int64)
    destinations = np.empty(num_events, dtype=np.int64)
    timestamps = np.empty(num_events, dtype=np.float64)
    features = np.empty((num_events, num_communities), dtype=np.float64)

    t = 0.0
    all_users = np.arange(num_users)
    for i in range(num_events):
        t += rng.exponential(1.0)
        dormant = {u for (u, lo, hi) in dormancy if lo <= t <= hi}
        active = all_users if not dormant else np.array(
            [u for u in range(num_users) if u not in dormant], dtype=np.int64
        )
        if len(active) == 0:
            raise GenerationError(f"all users dormant at t={t:.3f}")
        user = int(active[rng.integers(len(active))])
        c = int(user_comm[user])
        if rng.random() < intra_prob or num_communities == 1:
            item = int(c * items_per + rng.integers(items_per))
        else:
            other = int(rng.integers(num_communities - 1))
            oc = other if other < c else other + 1
            item = int(oc * items_per + rng.integers(items_per))
        sources[i] = user
        destinations[i] = num_users + item
        timestamps[i] = t
        onehot = np.zeros(num_communities)
        onehot[item_comm[item]] = 1.0
        features[i] = onehot + rng.normal(0.0, 0.1, size=num_communities)

    return EventStream(
        sources, destinations, timestamps, features, num_users, num_items
    )


def chronological_split(stream: EventStream, spec: SplitSpec) -> SplitResult:
    """Time-quantile split with a held-out set of "new" nodes.

    New nodes are sampled from the nodes active in the val/test period; any
    train-period event touching a new node is removed. Val and test events
    are tagged inductive when they touch at least one new node.
    """
    m = len(stream)
    if m == 0:
        raise SplitError("empty stream")
    ts = stream.timestamps
    t_val = float(np.quantile(ts, spec.train_frac))
    t_test = float(np.quantile(ts, spec.train_frac + spec.val_frac))
    train_mask = ts <= t_val
    val_mask = (ts > t_val) & (ts <= t_test)
    test_mask = ts > t_test

    later = stream.select(~train_mask)
    pool = sorted(later.node_set())
    rng = np.random.default_rng(spec.seed)
    n_new = int(spec.new_node_frac * len(pool))
    new_nodes = frozenset(
        int(x) for x in rng.choice(pool, size=n_new, replace=False)
    ) if n_new else frozenset()

    if new_nodes:
        arr = np.array(sorted(new_nodes), dtype=np.int64)
        touches_new = np.isin(stream.sources, arr) | np.isin(stream.destinations, arr)
        train_mask = train_mask & ~touches_new
    else:
        touches_new = np.zeros(m, dtype=bool)

    if not train_mask.any():
        raise SplitError("train split is empty after new-node removal")

    train = stream.select(train_mask)
    val = stream.select(val_mask)
    test = stream.select(test_mask)
    return SplitResult(
        train=train,
        val=val,
        test=test,
        new_nodes=new_nodes,
        val_inductive_mask=touches_new[val_mask],
        test_inductive_mask=touches_new[test_mask],
    )


def batch_iter(stream: EventStream, batch_size: int) -> Iterator[EventStream]:
    """Consecutive chronological chunks; the last batch may be short."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    for lo in range(0, len(stream), batch_size):
        yield stream.slice(lo, min(lo + batch_size, len(stream)))
