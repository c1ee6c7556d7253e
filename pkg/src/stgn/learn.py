"""Link-prediction training: decoder, negative sampling, and the batch loop.

Memory updates follow the deferred-message scheme: each batch's messages are
stored raw and applied (through the GRU, on the tape) at the start of the
next batch, so predictions never see the batch's own events while the
recurrent update still receives gradients.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .embedding import (
    EmbeddingConfig,
    add_model_params,
    batch_node_times,
    embed_batch_vars,
    time_encode,
)
from .ingest import EventStream, batch_iter
from .memory import NEVER, MemoryTable, add_gru_params, gru_cell
from .params import AdamState, ParameterStore, adam_step, collect_grads
from .similarity import SimilarityConfig, build_index, collect_candidates
from .staleness import StalenessConfig, StalenessReport, compute_report
from .temporal import TemporalAdjacency


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 200
    epochs: int = 10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    negatives_per_event: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise TrainingError("learning_rate must be >= 0")


@dataclass(frozen=True)
class EngineConfig:
    d_mem: int = 32
    d_time: int = 16
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    staleness: StalenessConfig = field(default_factory=StalenessConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    @property
    def payload_dim_base(self) -> int:
        return 2 * self.d_mem + self.d_time


@dataclass
class PendingMessages:
    """Raw per-target ingredients of the most recent message of each node."""

    targets: np.ndarray  # (m,) int64, unique
    others: np.ndarray  # (m,) int64
    deltas: np.ndarray  # (m,) float64, event time minus last_update
    timestamps: np.ndarray  # (m,) float64
    features: np.ndarray  # (m, d_edge)


@dataclass
class EngineState:
    cfg: EngineConfig
    params: ParameterStore
    adam: AdamState
    memory: MemoryTable
    adj: TemporalAdjacency
    rng: np.random.Generator
    num_sources: int
    num_destinations: int
    d_edge: int
    pending: Optional[PendingMessages] = None
    sim_index_cache: object = None
    batches_since_rebuild: int = 0

    @property
    def num_nodes(self) -> int:
        return self.num_sources + self.num_destinations


@dataclass
class BatchStats:
    loss: float
    num_events: int
    num_deltas: int = 0
    threshold: float = float("nan")
    num_stale: int = 0
    num_skipped: int = 0


@dataclass
class EpochStats:
    mean_loss: float
    batches: int
    stale_fraction: float
    wall_seconds: float

    def format_line(self, epoch: int) -> str:
        return (
            f"epoch={epoch} mean_loss={self.mean_loss:.6f} "
            f"stale_fraction={self.stale_fraction:.4f} "
            f"wall_seconds={self.wall_seconds:.2f}"
        )


def build_parameter_store(cfg: EngineConfig, d_edge: int) -> ParameterStore:
    params = ParameterStore(seed=cfg.seed)
    add_model_params(params, cfg.embedding, cfg.d_mem, d_edge, cfg.d_time)
    add_gru_params(params, cfg.d_mem, cfg.payload_dim_base + d_edge)
    d_emb = cfg.embedding.d_emb
    params.add("dec/W1", (2 * d_emb, d_emb))
    params.add("dec/b1", (d_emb,), init="zeros")
    params.add("dec/W2", (d_emb, 1))
    params.add("dec/b2", (1,), init="zeros")
    return params


def init_state(
    cfg: EngineConfig, num_sources: int, num_destinations: int, d_edge: int
) -> EngineState:
    return EngineState(
        cfg=cfg,
        params=build_parameter_store(cfg, d_edge),
        adam=AdamState(),
        memory=MemoryTable(num_sources + num_destinations, cfg.d_mem),
        adj=TemporalAdjacency(),
        rng=np.random.default_rng(cfg.seed + 1),
        num_sources=num_sources,
        num_destinations=num_destinations,
        d_edge=d_edge,
    )


def state_for_stream(cfg: EngineConfig, stream: EventStream) -> EngineState:
    return init_state(cfg, stream.num_sources, stream.num_destinations, stream.d_edge)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

def decode_logits(pvars: Dict[str, Var], src_rows: Var, dst_rows: Var) -> Var:
    """Link logits for paired embedding rows: (m, d_emb) x2 -> (m,)."""
    if src_rows.value.shape != dst_rows.value.shape:
        raise TrainingError("source/destination embedding shapes differ")
    x = ad.concat([src_rows, dst_rows], axis=1)
    hidden = ad.tanh(ad.add(ad.matmul(x, pvars["dec/W1"]), pvars["dec/b1"]))
    z = ad.add(ad.matmul(hidden, pvars["dec/W2"]), pvars["dec/b2"])
    z = ad.clip(z, -30.0, 30.0)
    return ad.reshape(z, (src_rows.value.shape[0],))


def decode_link(src_emb, dst_emb, params: ParameterStore) -> float:
    """Probability that the given pair interacts."""
    tape = Tape()
    pvars = params.as_vars(tape)
    src = tape.const(np.asarray(src_emb.values).reshape(1, -1))
    dst = tape.const(np.asarray(dst_emb.values).reshape(1, -1))
    z = decode_logits(pvars, src, dst)
    return float(ad.sigmoid(z).value[0])


def sample_negatives(
    batch: EventStream,
    num_sources: int,
    num_destinations: int,
    rng: np.random.Generator,
    per_event: int = 1,
) -> np.ndarray:
    """Uniform random destinations (global ids), resampled on collision with
    the true destination. Shape (len(batch) * per_event,)."""
    if num_destinations < 2:
        raise TrainingError("need at least 2 destinations to sample negatives")
    out = np.empty(len(batch) * per_event, dtype=np.int64)
    pos = 0
    for dst in np.repeat(batch.destinations, per_event):
        while True:
            cand = num_sources + int(rng.integers(num_destinations))
            if cand != dst:
                break
        out[pos] = cand
        pos += 1
    return out


# ---------------------------------------------------------------------------
# deferred memory updates
# ---------------------------------------------------------------------------

def build_pending(batch: EventStream, mem: MemoryTable) -> PendingMessages:
    """Most-recent raw message per endpoint of the batch, with time deltas
    taken against the pre-batch last_update (0 for fresh nodes)."""
    latest: Dict[int, Tuple[int, float, int]] = {}  # target -> (other, t, event row)
    for i in range(len(batch)):
        t = float(batch.timestamps[i])
        s, d = int(batch.sources[i]), int(batch.destinations[i])
        latest[s] = (d, t, i)
        latest[d] = (s, t, i)
    targets = np.array(sorted(latest), dtype=np.int64)
    others = np.array([latest[n][0] for n in targets], dtype=np.int64)
    ts = np.array([latest[n][1] for n in targets], dtype=np.float64)
    rows = np.array([latest[n][2] for n in targets], dtype=np.int64)
    last = mem.last_update[targets]
    deltas = np.where(last == NEVER, 0.0, ts - last)
    if np.any(deltas < 0):
        raise TrainingError("batch events precede stored memory timestamps")
    return PendingMessages(
        targets=targets,
        others=others,
        deltas=deltas,
        timestamps=ts,
        features=batch.features[rows].copy(),
    )


def apply_pending(
    pending: PendingMessages,
    mem_var: Var,
    pvars: Dict[str, Var],
) -> Var:
    """GRU-update the pending targets on the tape; returns the new memory."""
    tape = mem_var.tape
    idx = pending.targets
    h = ad.index_rows(mem_var, idx)
    x = ad.concat(
        [
            h,
            ad.index_rows(mem_var, pending.others),
            time_encode(pvars, pending.deltas),
            tape.const(pending.features),
        ],
        axis=1,
    )
    new_rows = gru_cell(pvars, x, h)
    return ad.scatter_rows(mem_var, idx, new_rows)


def flush_pending(state: EngineState) -> None:
    """Apply pending messages numerically (no gradient), e.g. at epoch end."""
    if state.pending is None:
        return
    tape = Tape()
    pvars = state.params.as_vars(tape)
    mem_var = tape.const(state.memory.states)
    updated = apply_pending(state.pending, mem_var, pvars)
    state.memory.states = updated.value.copy()
    state.memory.last_update[state.pending.targets] = state.pending.timestamps
    state.pending = None


# ---------------------------------------------------------------------------
# the batch forward pass (pure: no state mutation)
# ---------------------------------------------------------------------------

@dataclass
class BatchAux:
    post_memory: MemoryTable
    report: Optional[StalenessReport]
    sim_index: object
    skipped: int


def batch_loss(
    tape: Tape,
    pvars: Dict[str, Var],
    memory: MemoryTable,
    pending: Optional[PendingMessages],
    adj: TemporalAdjacency,
    batch: EventStream,
    negatives: np.ndarray,
    cfg: EngineConfig,
    d_edge: int,
    sim_index_override: object = None,
) -> Tuple[Var, BatchAux]:
    """Binary cross-entropy of the batch's link predictions on `tape`.

    Applies pending messages on the tape first; the inputs themselves are
    left untouched, so the same call is a valid finite-difference closure.
    """
    mem_var = tape.const(memory.states)
    post = memory.copy()
    if pending is not None:
        mem_var = apply_pending(pending, mem_var, pvars)
        post.states = mem_var.value
        post.last_update[pending.targets] = pending.timestamps

    report = compute_report(batch, post, cfg.staleness)
    sim_index = sim_index_override
    if report and report.stale_set and sim_index is None:
        candidates = collect_candidates(post)
        if len(candidates):
            sim_index = build_index(candidates, cfg.similarity)

    per_event = max(1, len(negatives) // max(1, len(batch)))
    neg_times = np.repeat(batch.timestamps, per_event)
    node_times = batch_node_times(
        batch, extra=list(zip(negatives.tolist(), neg_times.tolist()))
    )
    emb, rows, skipped = embed_batch_vars(
        node_times, mem_var, adj, pvars, cfg.embedding, d_edge,
        report=report, sim_index=sim_index,
        sim_cfg=cfg.similarity if sim_index is not None else None,
    )
    src_idx = np.array([rows[int(s)] for s in batch.sources], dtype=np.int64)
    dst_idx = np.array([rows[int(d)] for d in batch.destinations], dtype=np.int64)
    neg_idx = np.array([rows[int(n)] for n in negatives], dtype=np.int64)
    rep_src = np.repeat(src_idx, per_event)

    pos_logits = decode_logits(pvars, ad.index_rows(emb, src_idx), ad.index_rows(emb, dst_idx))
    neg_logits = decode_logits(pvars, ad.index_rows(emb, rep_src), ad.index_rows(emb, neg_idx))
    logits = ad.concat([pos_logits, neg_logits], axis=0)
    labels = np.concatenate([np.ones(len(batch)), np.zeros(len(negatives))])
    loss = ad.bce_with_logits_mean(logits, labels)
    return loss, BatchAux(post_memory=post, report=report, sim_index=sim_index, skipped=skipped)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train_one_batch(state: EngineState, batch: EventStream) -> BatchStats:
    """One optimization step on one chronological batch."""
    cfg = state.cfg
    tape = Tape()
    pvars = state.params.as_vars(tape)

    negatives = sample_negatives(
        batch, state.num_sources, state.num_destinations, state.rng,
        per_event=cfg.train.negatives_per_event,
    )

    reuse = (
        state.sim_index_cache is not None
        and state.batches_since_rebuild < cfg.similarity.rebuild_every
    )
    loss, aux = batch_loss(
        tape, pvars, state.memory, state.pending, state.adj, batch, negatives,
        cfg, state.d_edge,
        sim_index_override=state.sim_index_cache if reuse else None,
    )
    if not np.isfinite(loss.value):
        norms = {n: float(np.linalg.norm(a)) for n, a in state.params.arrays.items()}
        raise TrainingError(f"non-finite loss; parameter norms: {norms}")

    tape.backward(loss)
    grads = collect_grads(pvars)
    adam_step(
        state.params, grads, state.adam,
        learning_rate=cfg.train.learning_rate,
        beta1=cfg.train.beta1, beta2=cfg.train.beta2, epsilon=cfg.train.epsilon,
    )

    if aux.sim_index is not None:
        if not reuse:
            state.batches_since_rebuild = 0
        state.sim_index_cache = aux.sim_index
    state.batches_since_rebuild += 1

    state.memory.states = aux.post_memory.states.copy()
    state.memory.last_update = aux.post_memory.last_update.copy()
    state.pending = build_pending(batch, state.memory)
    state.adj.insert_batch(batch)

    report = aux.report
    return BatchStats(
        loss=float(loss.value),
        num_events=len(batch),
        num_deltas=len(report.deltas) if report else 0,
        threshold=report.threshold if report else float("nan"),
        num_stale=len(report.stale_set) if report else 0,
        num_skipped=aux.skipped,
    )


def reset_for_epoch(state: EngineState) -> None:
    state.memory.reset()
    state.adj = TemporalAdjacency()
    state.pending = None
    state.sim_index_cache = None
    state.batches_since_rebuild = 0


def train_epoch(
    state: EngineState,
    stream: EventStream,
    log_staleness=None,
) -> EpochStats:
    """One full chronological replay with optimization.

    Memory and adjacency are rebuilt from scratch, so they reflect exactly
    the train stream at epoch end.
    """
    t0 = _time.perf_counter()
    reset_for_epoch(state)
    losses: List[float] = []
    total_stale = 0
    total_deltas = 0
    for i, batch in enumerate(batch_iter(stream, state.cfg.train.batch_size)):
        stats = train_one_batch(state, batch)
        losses.append(stats.loss)
        total_stale += stats.num_stale
        total_deltas += stats.num_deltas
        if log_staleness is not None:
            log_staleness(i, stats)
    flush_pending(state)
    return EpochStats(
        mean_loss=float(np.mean(losses)) if losses else float("nan"),
        batches=len(losses),
        stale_fraction=total_stale / max(1, total_deltas),
        wall_seconds=_time.perf_counter() - t0,
    )


def train(
    state: EngineState,
    stream: EventStream,
    epochs: Optional[int] = None,
    verbose: bool = False,
    log_staleness=None,
) -> List[EpochStats]:
    epochs = epochs if epochs is not None else state.cfg.train.epochs
    history = []
    for epoch in range(1, epochs + 1):
        stats = train_epoch(state, stream, log_staleness=log_staleness)
        history.append(stats)
        if verbose:
            print(stats.format_line(epoch))
    return history
