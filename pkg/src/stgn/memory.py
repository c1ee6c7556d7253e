"""Per-node memory states: message construction, aggregation, and the
gated-recurrent update."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .ingest import Event
from .params import ParameterStore

NEVER = -np.inf


class MemoryError_(Exception):
    pass


@dataclass(frozen=True)
class RawMessage:
    target: int
    payload: np.ndarray
    timestamp: float


class MemoryTable:
    """One state vector and last-update timestamp per node.

    Nodes never touched by an event keep an all-zero state and a -inf
    last-update sentinel.
    """

    def __init__(self, num_nodes: int, dim: int):
        self.dim = int(dim)
        self.states = np.zeros((num_nodes, dim), dtype=np.float64)
        self.last_update = np.full(num_nodes, NEVER, dtype=np.float64)

    @property
    def num_nodes(self) -> int:
        return self.states.shape[0]

    def is_initialized(self, node: int) -> bool:
        return bool(self.last_update[node] > NEVER)

    def initialized_ids(self) -> np.ndarray:
        return np.flatnonzero(self.last_update > NEVER)

    def reset(self) -> None:
        self.states[:] = 0.0
        self.last_update[:] = NEVER

    def copy(self) -> "MemoryTable":
        out = MemoryTable(self.num_nodes, self.dim)
        out.states[:] = self.states
        out.last_update[:] = self.last_update
        return out


def add_gru_params(params: ParameterStore, dim: int, payload_dim: int) -> None:
    for gate in ("z", "r", "h"):
        params.add(f"gru/W{gate}", (payload_dim, dim))
        params.add(f"gru/U{gate}", (dim, dim))
        params.add(f"gru/b{gate}", (dim,), init="zeros")


def gru_cell(pvars: Dict[str, Var], x: Var, h: Var) -> Var:
    """Standard GRU over rows: x (m, payload_dim), h (m, dim) -> (m, dim)."""
    z = ad.sigmoid(x @ pvars["gru/Wz"] + h @ pvars["gru/Uz"] + pvars["gru/bz"])
    r = ad.sigmoid(x @ pvars["gru/Wr"] + h @ pvars["gru/Ur"] + pvars["gru/br"])
    cand = ad.tanh(x @ pvars["gru/Wh"] + ad.mul(r, h) @ pvars["gru/Uh"] + pvars["gru/bh"])
    one = x.tape.const(1.0)
    return ad.add(ad.mul(ad.sub(one, z), cand), ad.mul(z, h))


def message_delta_t(mem: MemoryTable, node: int, t: float) -> float:
    last = mem.last_update[node]
    return 0.0 if last == NEVER else t - last


def compute_messages(
    mem: MemoryTable,
    event: Event,
    time_enc: Callable[[float], np.ndarray],
) -> Tuple[RawMessage, RawMessage]:
    """Identity messages for both endpoints of one event.

    Payload layout: [state(self), state(counterpart), enc(dt), edge features].
    dt is 0 for a never-updated endpoint.
    """
    t = event.timestamp
    for node in (event.source, event.destination):
        if mem.last_update[node] > t:
            raise MemoryError_(
                f"event at t={t} precedes last_update of node {node}"
            )
    out = []
    for node, other in ((event.source, event.destination),
                        (event.destination, event.source)):
        payload = np.concatenate([
            mem.states[node],
            mem.states[other],
            np.asarray(time_enc(message_delta_t(mem, node, t)), dtype=np.float64),
            np.asarray(event.features, dtype=np.float64),
        ])
        if not np.isfinite(payload).all():
            raise MemoryError_(f"non-finite message payload for node {node}")
        out.append(RawMessage(target=node, payload=payload, timestamp=t))
    return out[0], out[1]


def aggregate_messages(messages: Iterable[RawMessage]) -> Dict[int, RawMessage]:
    """Keep, per target, the most recent message; ties go to the latest in
    iteration (batch) order."""
    kept: Dict[int, RawMessage] = {}
    for msg in messages:
        cur = kept.get(msg.target)
        if cur is None or msg.timestamp >= cur.timestamp:
            kept[msg.target] = msg
    return kept


def update_memory(
    mem: MemoryTable,
    node: int,
    msg: RawMessage,
    params: ParameterStore,
) -> None:
    """Apply the GRU update for one node in place."""
    if msg.timestamp < mem.last_update[node]:
        raise MemoryError_(f"message at t={msg.timestamp} precedes last_update")
    if not np.isfinite(msg.payload).all():
        raise MemoryError_("non-finite values in message payload")
    tape = Tape()
    pvars = params.as_vars(tape)
    x = tape.const(msg.payload.reshape(1, -1))
    h = tape.const(mem.states[node].reshape(1, -1))
    mem.states[node] = gru_cell(pvars, x, h).value[0]
    mem.last_update[node] = msg.timestamp


def is_initialized(mem: MemoryTable, node: int) -> bool:
    return mem.is_initialized(node)
