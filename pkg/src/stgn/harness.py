"""Experiment harness: frozen-parameter evaluation, quantile ablation,
table rendering, and optional figure output."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .embedding import batch_node_times, embed_batch_vars
from .ingest import EventStream, SplitResult, SplitSpec, batch_iter, chronological_split
from .learn import (
    EngineConfig,
    EngineState,
    apply_pending,
    build_pending,
    decode_logits,
    flush_pending,
    sample_negatives,
    state_for_stream,
    train,
)
from .metrics import MetricError, average_precision, precision_at_half, roc_auc
from .similarity import build_index, collect_candidates
from .staleness import compute_report


class HarnessError(Exception):
    pass


@dataclass(frozen=True)
class EvalResult:
    auc: float
    average_precision: float
    precision_at_half: float
    scope: str  # transductive | inductive | combined
    model_tag: str  # baseline | ball_tree | brute_force
    quantile: float


def model_tag(cfg: EngineConfig) -> str:
    if not cfg.staleness.enabled:
        return "baseline"
    return cfg.similarity.backend


def evaluate(
    split: EventStream,
    state: EngineState,
    scope: str = "combined",
    inductive_mask: Optional[np.ndarray] = None,
    negative_seed: int = 12345,
) -> EvalResult:
    """Replay a split with frozen parameters, scoring each event against one
    seeded negative; memory and adjacency advance as the replay proceeds."""
    if scope not in ("transductive", "inductive", "combined"):
        raise HarnessError(f"unknown scope: {scope}")
    if inductive_mask is None:
        inductive_mask = np.zeros(len(split), dtype=bool)
    cfg = state.cfg
    rng = np.random.default_rng(negative_seed)

    scores: List[float] = []
    labels: List[int] = []
    flags: List[bool] = []

    offset = 0
    for batch in batch_iter(split, cfg.train.batch_size):
        tape = Tape()
        pvars = state.params.as_vars(tape)
        mem_var = tape.const(state.memory.states)

        report = compute_report(batch, state.memory, cfg.staleness)
        sim_index = None
        if report and report.stale_set:
            candidates = collect_candidates(state.memory)
            if len(candidates):
                sim_index = build_index(candidates, cfg.similarity)

        negatives = sample_negatives(
            batch, state.num_sources, state.num_destinations, rng, per_event=1
        )
        node_times = batch_node_times(
            batch, extra=list(zip(negatives.tolist(), batch.timestamps.tolist()))
        )
        emb, rows, _ = embed_batch_vars(
            node_times, mem_var, state.adj, pvars, cfg.embedding, state.d_edge,
            report=report, sim_index=sim_index,
            sim_cfg=cfg.similarity if sim_index is not None else None,
        )
        src_idx = np.array([rows[int(s)] for s in batch.sources], dtype=np.int64)
        dst_idx = np.array([rows[int(d)] for d in batch.destinations], dtype=np.int64)
        neg_idx = np.array([rows[int(n)] for n in negatives], dtype=np.int64)
        pos = ad.sigmoid(decode_logits(
            pvars, ad.index_rows(emb, src_idx), ad.index_rows(emb, dst_idx))).value
        neg = ad.sigmoid(decode_logits(
            pvars, ad.index_rows(emb, src_idx), ad.index_rows(emb, neg_idx))).value

        batch_flags = inductive_mask[offset : offset + len(batch)]
        scores.extend(pos.tolist())
        labels.extend([1] * len(batch))
        flags.extend(batch_flags.tolist())
        scores.extend(neg.tolist())
        labels.extend([0] * len(batch))
        flags.extend(batch_flags.tolist())
        offset += len(batch)

        # memory advances immediately during replay (parameters frozen)
        pending = build_pending(batch, state.memory)
        t2 = Tape()
        pv2 = state.params.as_vars(t2)
        updated = apply_pending(pending, t2.const(state.memory.states), pv2)
        state.memory.states = updated.value.copy()
        state.memory.last_update[pending.targets] = pending.timestamps
        state.adj.insert_batch(batch)

    scores_a = np.array(scores)
    labels_a = np.array(labels)
    flags_a = np.array(flags, dtype=bool)
    if scope == "transductive":
        keep = ~flags_a
    elif scope == "inductive":
        keep = flags_a
    else:
        keep = np.ones(len(flags_a), dtype=bool)
    if not keep.any():
        raise MetricError(f"insufficient events for scope {scope}")
    try:
        auc = roc_auc(scores_a[keep], labels_a[keep])
        ap = average_precision(scores_a[keep], labels_a[keep])
    except MetricError as exc:
        raise MetricError(f"insufficient events for scope {scope}: {exc}") from None
    return EvalResult(
        auc=auc,
        average_precision=ap,
        precision_at_half=precision_at_half(scores_a[keep], labels_a[keep]),
        scope=scope,
        model_tag=model_tag(state.cfg),
        quantile=state.cfg.staleness.p,
    )


@dataclass
class ExperimentResult:
    state: EngineState
    split: SplitResult
    val: EvalResult
    test: EvalResult
    history: list


def run_experiment(
    stream: EventStream,
    cfg: EngineConfig,
    split_spec: Optional[SplitSpec] = None,
    scope: str = "combined",
    epochs: Optional[int] = None,
    verbose: bool = False,
    log_staleness=None,
) -> ExperimentResult:
    """Train on the chronological train split, then evaluate val and test
    with frozen parameters (memory carried across the boundary)."""
    split_spec = split_spec or SplitSpec(seed=cfg.seed)
    split = chronological_split(stream, split_spec)
    state = state_for_stream(cfg, stream)
    history = train(state, split.train, epochs=epochs, verbose=verbose,
                    log_staleness=log_staleness)
    val = evaluate(split.val, state, scope=scope,
                   inductive_mask=split.val_inductive_mask)
    test = evaluate(split.test, state, scope=scope,
                    inductive_mask=split.test_inductive_mask)
    return ExperimentResult(state=state, split=split, val=val, test=test,
                            history=history)


# ---------------------------------------------------------------------------
# ablation over quantiles
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("model", "quantile", "AUC", "precision")


@dataclass
class AblationTable:
    columns: Tuple[str, ...]
    rows: List[Tuple[str, str, str, str]]

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        lines.extend(",".join(row) for row in self.rows)
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        table = [self.columns, *self.rows]
        widths = [max(len(r[i]) for r in table) for i in range(len(self.columns))]
        lines = [
            "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
            for row in table
        ]
        return "\n".join(lines) + "\n"


def run_ablation(
    quantiles: Sequence[float],
    stream: EventStream,
    base_cfg: EngineConfig,
    split_spec: Optional[SplitSpec] = None,
    scope: str = "combined",
    epochs: Optional[int] = None,
    include_baseline: bool = True,
    verbose: bool = False,
) -> AblationTable:
    """One trained model per quantile (shared seeds), test-set metrics per row."""
    for q in quantiles:
        if not (0.0 < q < 1.0):
            raise HarnessError(f"quantile {q} outside (0,1)")
    rows: List[Tuple[str, str, str, str]] = []
    if quantiles and include_baseline:
        cfg = dataclasses.replace(
            base_cfg, staleness=dataclasses.replace(base_cfg.staleness, enabled=False)
        )
        res = run_experiment(stream, cfg, split_spec, scope=scope,
                             epochs=epochs, verbose=verbose).test
        rows.append(("baseline", "-", f"{res.auc:.4f}", f"{res.average_precision:.4f}"))
    for q in quantiles:
        cfg = dataclasses.replace(
            base_cfg,
            staleness=dataclasses.replace(
                base_cfg.staleness, alpha=1.0 - q, enabled=True
            ),
        )
        res = run_experiment(stream, cfg, split_spec, scope=scope,
                             epochs=epochs, verbose=verbose).test
        rows.append((
            model_tag(cfg), repr(float(q)),
            f"{res.auc:.4f}", f"{res.average_precision:.4f}",
        ))
    return AblationTable(columns=ABLATION_COLUMNS, rows=rows)


def render_ablation_figure(table: AblationTable, path) -> None:
    """Line plot of AUC and precision against the quantile, written to file."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    qs, aucs, precs = [], [], []
    baseline_auc = None
    for model, q, auc, prec in table.rows:
        if q == "-":
            baseline_auc = float(auc)
            continue
        qs.append(float(q))
        aucs.append(float(auc))
        precs.append(float(prec))
    order = np.argsort(qs)
    qs = np.array(qs)[order]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(qs, np.array(aucs)[order], marker="o", label="AUC")
    ax.plot(qs, np.array(precs)[order], marker="s", label="average precision")
    if baseline_auc is not None:
        ax.axhline(baseline_auc, color="gray", linestyle="--", label="baseline AUC")
    ax.set_xlabel("quantile p = 1 - alpha")
    ax.set_ylabel("test metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
