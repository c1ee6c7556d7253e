"""Node embeddings: harmonic time encoding, multi-head temporal attention
over last-N neighbors, and KNN-based augmentation of stale nodes.

A stale node's embedding is (self memory term) + (similar-node terms) +
(temporal attention term), computed in that association order. The
attention term for a stale node runs through the same singleton code path
as attention_embed, so augmentation additivity holds bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .ingest import EventStream
from .memory import MemoryTable
from .params import ParameterStore
from .similarity import Index, SimilarityConfig, knn_query
from .staleness import StalenessReport
from .temporal import TemporalAdjacency


class EmbeddingError(Exception):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    layers: int = 1
    neighbors: int = 10
    heads: int = 2
    d_emb: int = 32
    similar_mode: str = "attention"  # or "memory"
    combine: str = "sum"  # or "mean"

    def __post_init__(self):
        if self.d_emb % self.heads:
            raise EmbeddingError("d_emb must be divisible by heads")
        if self.layers not in (1, 2):
            raise EmbeddingError("layers must be 1 or 2")
        if self.similar_mode not in ("attention", "memory"):
            raise EmbeddingError(f"unknown similar_mode: {self.similar_mode}")
        if self.combine not in ("sum", "mean"):
            raise EmbeddingError(f"unknown combine: {self.combine}")


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    node: int
    at_time: float


# ---------------------------------------------------------------------------
# time encoding
# ---------------------------------------------------------------------------

def frequency_ladder(d_time: int) -> np.ndarray:
    return np.array([1.0 / 10 ** (j * 4.0 / d_time) for j in range(d_time)])


def add_time_params(params: ParameterStore, d_time: int) -> None:
    params.add_fixed("time/freq", frequency_ladder(d_time))
    params.add("time/phase", (d_time,), init="zeros")


def time_encode(pvars: Dict[str, Var], delta_t: np.ndarray) -> Var:
    """cos(freq * dt + phase) row-wise: dt (B,) -> (B, d_time)."""
    dt = np.asarray(delta_t, dtype=np.float64).reshape(-1, 1)
    freq = pvars["time/freq"]
    scaled = ad.mul(freq.tape.const(dt), freq)
    return ad.cos(ad.add(scaled, pvars["time/phase"]))


class TimeEncoder:
    """Numeric view over the trainable frequency/phase arrays."""

    def __init__(self, params: ParameterStore):
        self.params = params

    @property
    def frequencies(self) -> np.ndarray:
        return self.params.arrays["time/freq"]

    @property
    def phases(self) -> np.ndarray:
        return self.params.arrays["time/phase"]

    def encode(self, delta_t) -> np.ndarray:
        dt = np.asarray(delta_t, dtype=np.float64)
        out = np.cos(dt.reshape(-1, 1) * self.frequencies + self.phases)
        return out[0] if dt.ndim == 0 else out

    def __call__(self, delta_t) -> np.ndarray:
        return self.encode(delta_t)


# ---------------------------------------------------------------------------
# attention parameters
# ---------------------------------------------------------------------------

def add_attention_params(
    params: ParameterStore,
    cfg: EmbeddingConfig,
    d_mem: int,
    d_edge: int,
    d_time: int,
) -> None:
    for layer in range(1, cfg.layers + 1):
        d_in = d_mem if layer == 1 else cfg.d_emb
        prefix = f"attn/l{layer}"
        params.add(f"{prefix}/Wq", (d_in + d_time, cfg.d_emb))
        params.add(f"{prefix}/Wk", (d_in + d_edge + d_time, cfg.d_emb))
        params.add(f"{prefix}/Wv", (d_in + d_edge + d_time, cfg.d_emb))
        params.add(f"{prefix}/W1", (cfg.d_emb + d_in, cfg.d_emb))
        params.add(f"{prefix}/b1", (cfg.d_emb,), init="zeros")
        params.add(f"{prefix}/W2", (cfg.d_emb, cfg.d_emb))
        params.add(f"{prefix}/b2", (cfg.d_emb,), init="zeros")
    if d_mem != cfg.d_emb:
        params.add("self_map/W", (d_mem, cfg.d_emb))


def add_model_params(
    params: ParameterStore,
    cfg: EmbeddingConfig,
    d_mem: int,
    d_edge: int,
    d_time: int,
) -> None:
    """All embedding-side parameters (time encoder + attention stack)."""
    add_time_params(params, d_time)
    add_attention_params(params, cfg, d_mem, d_edge, d_time)


# ---------------------------------------------------------------------------
# temporal attention
# ---------------------------------------------------------------------------

def gather_neighbors(
    adj: TemporalAdjacency,
    nodes: Sequence[int],
    times: Sequence[float],
    n: int,
    d_edge: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Last-n neighbor ids, time deltas, edge features, and a validity mask.

    Missing slots are padded with id 0, dt 0, zero features, mask 0.
    """
    b = len(nodes)
    ids = np.zeros((b, n), dtype=np.int64)
    dts = np.zeros((b, n), dtype=np.float64)
    feats = np.zeros((b, n, d_edge), dtype=np.float64)
    mask = np.zeros((b, n), dtype=np.float64)
    for i, (node, t) in enumerate(zip(nodes, times)):
        recs = adj.last_n_neighbors(int(node), float(t), n)
        for j, rec in enumerate(recs):
            ids[i, j] = rec.neighbor
            dts[i, j] = t - rec.timestamp
            feats[i, j] = adj.edge_features(rec.event_id)
            mask[i, j] = 1.0
    return ids, dts, feats, mask


def attention_rows(
    nodes: Sequence[int],
    times: Sequence[float],
    mem_var: Var,
    adj: TemporalAdjacency,
    pvars: Dict[str, Var],
    cfg: EmbeddingConfig,
    d_edge: int,
) -> Var:
    """Temporal-attention embeddings for (node, time) pairs: (B, d_emb)."""

    def layer_embed(cur_nodes, cur_times, layer: int) -> Var:
        if layer == 0:
            return ad.index_rows(mem_var, np.asarray(cur_nodes, dtype=np.int64))
        b = len(cur_nodes)
        n = cfg.neighbors
        h_self = layer_embed(cur_nodes, cur_times, layer - 1)
        nbr_ids, nbr_dt, nbr_feat, mask = gather_neighbors(
            adj, cur_nodes, cur_times, n, d_edge
        )
        rep_times = np.repeat(np.asarray(cur_times, dtype=np.float64), n)
        h_nbr = layer_embed(nbr_ids.reshape(-1), rep_times, layer - 1)

        prefix = f"attn/l{layer}"
        heads, dh = cfg.heads, cfg.d_emb // cfg.heads
        enc_zero = time_encode(pvars, np.zeros(b))
        q_in = ad.concat([h_self, enc_zero], axis=1)
        q = ad.matmul(q_in, pvars[f"{prefix}/Wq"])
        enc_nbr = time_encode(pvars, nbr_dt.reshape(-1))
        kv_in = ad.concat(
            [h_nbr, mem_var.tape.const(nbr_feat.reshape(b * n, d_edge)), enc_nbr],
            axis=1,
        )
        k = ad.matmul(kv_in, pvars[f"{prefix}/Wk"])
        v = ad.matmul(kv_in, pvars[f"{prefix}/Wv"])

        q4 = ad.reshape(q, (b, 1, heads, dh))
        k4 = ad.reshape(k, (b, n, heads, dh))
        v4 = ad.reshape(v, (b, n, heads, dh))
        scores = ad.mul(
            ad.sum_(ad.mul(q4, k4), axis=3),
            mem_var.tape.const(1.0 / np.sqrt(dh)),
        )  # (b, n, heads)
        weights = ad.masked_softmax(scores, mask[:, :, None], axis=1)
        attn = ad.sum_(ad.mul(ad.reshape(weights, (b, n, heads, 1)), v4), axis=1)
        attn = ad.reshape(attn, (b, cfg.d_emb))

        x = ad.concat([attn, h_self], axis=1)
        hidden = ad.tanh(ad.add(ad.matmul(x, pvars[f"{prefix}/W1"]), pvars[f"{prefix}/b1"]))
        return ad.add(ad.matmul(hidden, pvars[f"{prefix}/W2"]), pvars[f"{prefix}/b2"])

    return layer_embed(list(nodes), list(times), cfg.layers)


def self_term_row(mem_var: Var, node: int, pvars: Dict[str, Var], cfg: EmbeddingConfig) -> Var:
    row = ad.index_rows(mem_var, np.array([node], dtype=np.int64))
    if mem_var.value.shape[1] == cfg.d_emb:
        return row
    return ad.matmul(row, pvars["self_map/W"])


def attention_embed(
    node: int,
    t: float,
    mem: MemoryTable,
    adj: TemporalAdjacency,
    params: ParameterStore,
    cfg: EmbeddingConfig,
    d_edge: int,
) -> EmbeddingVector:
    """Numeric single-node temporal-attention embedding."""
    tape = Tape()
    pvars = params.as_vars(tape)
    mem_var = tape.const(mem.states)
    out = attention_rows([node], [t], mem_var, adj, pvars, cfg, d_edge)
    values = out.value[0]
    if not np.isfinite(values).all():
        raise EmbeddingError(f"non-finite embedding for node {node}")
    return EmbeddingVector(values=values, node=int(node), at_time=float(t))


# ---------------------------------------------------------------------------
# batch embedding with staleness augmentation
# ---------------------------------------------------------------------------

def batch_node_times(
    batch: EventStream, extra: Optional[Sequence[Tuple[int, float]]] = None
) -> Dict[int, float]:
    """Reference time per node: the timestamp of its first event in the batch
    (for negatives, of the first event they were sampled for)."""
    times: Dict[int, float] = {}
    for src, dst, t in zip(
        batch.sources.tolist(), batch.destinations.tolist(), batch.timestamps.tolist()
    ):
        times.setdefault(src, t)
        times.setdefault(dst, t)
    for node, t in extra or ():
        times.setdefault(int(node), float(t))
    return times


def embed_batch_vars(
    node_times: Dict[int, float],
    mem_var: Var,
    adj: TemporalAdjacency,
    pvars: Dict[str, Var],
    cfg: EmbeddingConfig,
    d_edge: int,
    report: Optional[StalenessReport] = None,
    sim_index: Optional[Index] = None,
    sim_cfg: Optional[SimilarityConfig] = None,
) -> Tuple[Var, Dict[int, int], int]:
    """Embeddings for every node in node_times on the caller's tape.

    Returns the (B, d_emb) matrix, a node -> row map, and the number of
    stale nodes skipped for lack of similarity candidates.
    """
    all_nodes = sorted(node_times)
    stale_pool = set()
    if report is not None and sim_index is not None and sim_cfg is not None:
        stale_pool = report.stale_set & set(all_nodes)

    skipped = 0
    augmented: List[Tuple[int, List[Tuple[int, float]]]] = []
    for node in sorted(stale_pool):
        hits = knn_query(sim_index, mem_var.value[node], sim_cfg.k, exclude={node})
        if hits:
            augmented.append((node, hits))
        else:
            skipped += 1

    augmented_ids = {node for node, _ in augmented}
    plain = [n for n in all_nodes if n not in augmented_ids]

    parts: List[Var] = []
    order: List[int] = []
    if plain:
        parts.append(
            attention_rows(plain, [node_times[n] for n in plain],
                           mem_var, adj, pvars, cfg, d_edge)
        )
        order.extend(plain)

    for node, hits in augmented:
        t = node_times[node]
        # singleton attention pass: same arithmetic path as attention_embed
        gat = attention_rows([node], [t], mem_var, adj, pvars, cfg, d_edge)
        self_term = self_term_row(mem_var, node, pvars, cfg)
        sims: List[Var] = []
        for sim_id, _dist in hits:
            if cfg.similar_mode == "attention":
                sims.append(attention_rows([sim_id], [t], mem_var, adj, pvars, cfg, d_edge))
            else:
                sims.append(self_term_row(mem_var, sim_id, pvars, cfg))
        combined = sims[0]
        for extra in sims[1:]:
            combined = ad.add(combined, extra)
        if cfg.combine == "mean":
            combined = ad.mul(combined, mem_var.tape.const(1.0 / len(sims)))
        parts.append(ad.add(ad.add(self_term, combined), gat))
        order.append(node)

    out = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
    return out, {node: i for i, node in enumerate(order)}, skipped


def embed_batch(
    batch: EventStream,
    mem: MemoryTable,
    adj: TemporalAdjacency,
    params: ParameterStore,
    cfg: EmbeddingConfig,
    report: Optional[StalenessReport] = None,
    sim_index: Optional[Index] = None,
    sim_cfg: Optional[SimilarityConfig] = None,
    extra: Optional[Sequence[Tuple[int, float]]] = None,
) -> Dict[int, EmbeddingVector]:
    """Numeric batch embeddings for all batch endpoints (plus extras)."""
    tape = Tape()
    pvars = params.as_vars(tape)
    mem_var = tape.const(mem.states)
    node_times = batch_node_times(batch, extra)
    out, rows, _ = embed_batch_vars(
        node_times, mem_var, adj, pvars, cfg, batch.d_edge,
        report=report, sim_index=sim_index, sim_cfg=sim_cfg,
    )
    return {
        node: EmbeddingVector(out.value[i], node, node_times[node])
        for node, i in rows.items()
    }
