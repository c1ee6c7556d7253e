"""Command-line experiment harness.

Configuration is flat key=value text; every command-line flag overrides the
corresponding file key.
"""

from __future__ import annotations

import dataclasses
import sys
from typing import Dict, Optional

import click

from .checkpoint import load_checkpoint, save_checkpoint
from .embedding import EmbeddingConfig
from .harness import evaluate, run_ablation, run_experiment, render_ablation_figure
from .ingest import (
    SplitSpec,
    chronological_split,
    generate_synthetic,
    parse_jodie_csv,
    write_jodie_csv,
)
from .learn import EngineConfig, TrainConfig
from .similarity import SimilarityConfig
from .staleness import StalenessConfig


def read_config_file(path: Optional[str]) -> Dict[str, str]:
    """Flat key=value lines; blank lines and #-comments ignored."""
    out: Dict[str, str] = {}
    if not path:
        return out
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise click.ClickException(f"{path}: line {lineno}: expected key=value")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


_DEFAULTS = {
    "d_mem": 32, "d_time": 16,
    "layers": 1, "neighbors": 10, "heads": 2, "d_emb": 32,
    "similar_mode": "attention", "combine": "sum",
    "alpha": 0.025, "apply_to": "sources_only", "backend": "ball_tree",
    "k": 1, "leaf_capacity": 16, "rebuild_every": 1,
    "batch_size": 200, "epochs": 10, "learning_rate": 1e-3,
    "negatives_per_event": 1, "seed": 0,
    "train_frac": 0.70, "val_frac": 0.15, "new_node_frac": 0.10,
    "synth_users": 200, "synth_items": 200, "synth_communities": 8,
    "synth_events": 20000, "synth_intra_prob": 0.9,
}


def merge_options(file_cfg: Dict[str, str], overrides: Dict[str, object]) -> Dict[str, object]:
    merged: Dict[str, object] = dict(_DEFAULTS)
    for key, raw in file_cfg.items():
        if key not in _DEFAULTS:
            raise click.ClickException(f"unknown config key: {key}")
        kind = type(_DEFAULTS[key])
        merged[key] = kind(raw) if kind is not str else raw
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def build_engine_config(opts: Dict[str, object]) -> EngineConfig:
    backend = str(opts["backend"])
    enabled = backend != "off"
    sim_backend = backend if enabled else "ball_tree"
    return EngineConfig(
        d_mem=int(opts["d_mem"]),
        d_time=int(opts["d_time"]),
        embedding=EmbeddingConfig(
            layers=int(opts["layers"]),
            neighbors=int(opts["neighbors"]),
            heads=int(opts["heads"]),
            d_emb=int(opts["d_emb"]),
            similar_mode=str(opts["similar_mode"]),
            combine=str(opts["combine"]),
        ),
        staleness=StalenessConfig(
            alpha=float(opts["alpha"]),
            apply_to=str(opts["apply_to"]),
            enabled=enabled,
        ),
        similarity=SimilarityConfig(
            k=int(opts["k"]),
            backend=sim_backend,
            leaf_capacity=int(opts["leaf_capacity"]),
            rebuild_every=int(opts["rebuild_every"]),
        ),
        train=TrainConfig(
            batch_size=int(opts["batch_size"]),
            epochs=int(opts["epochs"]),
            learning_rate=float(opts["learning_rate"]),
            negatives_per_event=int(opts["negatives_per_event"]),
        ),
        seed=int(opts["seed"]),
    )


def build_split_spec(opts: Dict[str, object]) -> SplitSpec:
    return SplitSpec(
        train_frac=float(opts["train_frac"]),
        val_frac=float(opts["val_frac"]),
        new_node_frac=float(opts["new_node_frac"]),
        seed=int(opts["seed"]),
    )


def load_stream(data: str, opts: Dict[str, object]):
    if data == "synth":
        return generate_synthetic(
            num_users=int(opts["synth_users"]),
            num_items=int(opts["synth_items"]),
            num_communities=int(opts["synth_communities"]),
            num_events=int(opts["synth_events"]),
            intra_prob=float(opts["synth_intra_prob"]),
            seed=int(opts["seed"]),
        )
    return parse_jodie_csv(data)


def staleness_logger(enabled: bool):
    if not enabled:
        return None

    def log(batch_index, stats):
        click.echo(
            f"batch={batch_index} n={stats.num_deltas} "
            f"threshold={stats.threshold!r} stale={stats.num_stale}",
            err=True,
        )

    return log


_SCOPES = {"trans": "transductive", "ind": "inductive", "all": "combined"}


def _result_line(tag: str, res) -> str:
    return (
        f"{tag}: scope={res.scope} model={res.model_tag} quantile={res.quantile:.4f} "
        f"auc={res.auc:.4f} ap={res.average_precision:.4f} "
        f"precision@0.5={res.precision_at_half:.4f}"
    )


@click.group()
def main():
    """Staleness-aware temporal graph embedding experiments."""


@main.command("gen-synth")
@click.option("--users", type=int, default=200, show_default=True)
@click.option("--items", type=int, default=200, show_default=True)
@click.option("--communities", type=int, default=8, show_default=True)
@click.option("--events", type=int, default=20000, show_default=True)
@click.option("--intra-prob", type=float, default=0.9, show_default=True)
@click.option("--dormant", multiple=True, metavar="USER:START:END",
              help="Dormancy window; repeatable.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(writable=True))
def gen_synth(users, items, communities, events, intra_prob, dormant, seed, out):
    """Write a synthetic interaction stream as a JODIE-format CSV."""
    windows = []
    for window in dormant:
        user, start, end = window.split(":")
        windows.append((int(user), float(start), float(end)))
    stream = generate_synthetic(
        num_users=users, num_items=items, num_communities=communities,
        num_events=events, intra_prob=intra_prob, dormancy=windows, seed=seed,
    )
    write_jodie_csv(stream, out)
    click.echo(f"wrote {len(stream)} events to {out}")


def _common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True),
                      default=None, help="Flat key=value config file.")(fn)
    fn = click.option("--backend", type=click.Choice(["off", "ball_tree", "brute_force"]),
                      default=None)(fn)
    fn = click.option("--alpha", type=float, default=None)(fn)
    fn = click.option("--epochs", type=int, default=None)(fn)
    fn = click.option("--batch-size", type=int, default=None)(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--log-staleness", is_flag=True, default=False,
                      help="Print per-batch staleness lines to stderr.")(fn)
    return fn


@main.command("train")
@click.option("--data", required=True, help="CSV path, or 'synth'.")
@click.option("--out", "ckpt_out", required=True, type=click.Path(writable=True))
@_common_options
def train_cmd(data, ckpt_out, config_path, backend, alpha, epochs, batch_size,
              seed, log_staleness):
    """Train a model and save a checkpoint positioned at the train-split end."""
    opts = merge_options(read_config_file(config_path), {
        "backend": backend, "alpha": alpha, "epochs": epochs,
        "batch_size": batch_size, "seed": seed,
    })
    cfg = build_engine_config(opts)
    split_spec = build_split_spec(opts)
    stream = load_stream(data, opts)
    split = chronological_split(stream, split_spec)

    from .learn import state_for_stream, train as train_loop

    state = state_for_stream(cfg, stream)
    train_loop(state, split.train, verbose=True,
               log_staleness=staleness_logger(log_staleness))
    save_checkpoint(state, ckpt_out, extra={
        "data": data,
        "options": {k: opts[k] for k in sorted(opts)},
    })
    click.echo(f"checkpoint written to {ckpt_out}")

    val = evaluate(split.val, state, scope="combined",
                   inductive_mask=split.val_inductive_mask)
    test = evaluate(split.test, state, scope="combined",
                    inductive_mask=split.test_inductive_mask)
    click.echo(_result_line("val", val))
    click.echo(_result_line("test", test))


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--scope", type=click.Choice(sorted(_SCOPES)), default="all",
              show_default=True)
def eval_cmd(ckpt, scope):
    """Evaluate a saved checkpoint on its validation and test splits."""
    loaded = load_checkpoint(ckpt)
    state = loaded.state
    extra = loaded.extra
    if "data" not in extra:
        raise click.ClickException("checkpoint carries no data source")
    opts = merge_options({}, {})
    opts.update(extra.get("options", {}))
    stream = load_stream(extra["data"], opts)
    split = chronological_split(stream, build_split_spec(opts))
    scope_name = _SCOPES[scope]
    val = evaluate(split.val, state, scope=scope_name,
                   inductive_mask=split.val_inductive_mask)
    test = evaluate(split.test, state, scope=scope_name,
                    inductive_mask=split.test_inductive_mask)
    click.echo(_result_line("val", val))
    click.echo(_result_line("test", test))


@main.command("ablate")
@click.option("--quantiles", required=True,
              help="Comma-separated, e.g. 0.975,0.8,0.7")
@click.option("--data", default="synth", show_default=True)
@click.option("--out-csv", type=click.Path(writable=True), default=None,
              help="Write the machine-readable table here.")
@click.option("--fig-out", type=click.Path(writable=True), default=None,
              help="Render a metric-vs-quantile figure to this file.")
@_common_options
def ablate_cmd(quantiles, data, out_csv, fig_out, config_path, backend, alpha,
               epochs, batch_size, seed, log_staleness):
    """Train one model per quantile and tabulate test metrics."""
    opts = merge_options(read_config_file(config_path), {
        "backend": backend, "epochs": epochs,
        "batch_size": batch_size, "seed": seed,
    })
    qs = [float(q) for q in quantiles.split(",") if q.strip()] if quantiles else []
    cfg = build_engine_config(opts)
    stream = load_stream(data, opts)
    table = run_ablation(qs, stream, cfg, split_spec=build_split_spec(opts))
    click.echo(table.to_text(), nl=False)
    if out_csv:
        with open(out_csv, "w", encoding="utf-8") as fh:
            fh.write(table.to_csv())
        click.echo(f"csv written to {out_csv}")
    if fig_out:
        render_ablation_figure(table, fig_out)
        click.echo(f"figure written to {fig_out}")


if __name__ == "__main__":
    main()
