"""Single-file binary checkpoints: magic "STGN", u32 version, a JSON config
block, then named float64 little-endian arrays."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .embedding import EmbeddingConfig
from .learn import (
    EngineConfig,
    EngineState,
    PendingMessages,
    TrainConfig,
)
from .memory import MemoryTable
from .params import AdamState, ParameterStore
from .similarity import SimilarityConfig
from .staleness import StalenessConfig
from .temporal import TemporalAdjacency

MAGIC = b"STGN"
VERSION = 1


class CheckpointError(Exception):
    pass


def _read_exactly(fh, n: int, field: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated file while reading {field}")
    return buf


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f8")
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<I", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<I", data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(data.tobytes())


def _read_array(fh) -> Tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exactly(fh, 4, "array name length"))
    name = _read_exactly(fh, name_len, "array name").decode("utf-8")
    (rank,) = struct.unpack("<I", _read_exactly(fh, 4, f"rank of {name}"))
    shape = tuple(
        struct.unpack("<Q", _read_exactly(fh, 8, f"dims of {name}"))[0]
        for _ in range(rank)
    )
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exactly(fh, count * 8, f"payload of {name}")
    return name, np.frombuffer(payload, dtype="<f8").reshape(shape).copy()


def _config_dict(state: EngineState, extra: Optional[dict]) -> dict:
    return {
        "engine": dataclasses.asdict(state.cfg),
        "num_sources": state.num_sources,
        "num_destinations": state.num_destinations,
        "d_edge": state.d_edge,
        "adam_step": state.adam.step,
        "rng_state": state.rng.bit_generator.state,
        "param_names": state.params.names(),
        "param_seed": state.params.seed,
        "has_pending": state.pending is not None,
        "extra": extra or {},
    }


def _engine_config_from_dict(d: dict) -> EngineConfig:
    return EngineConfig(
        d_mem=d["d_mem"],
        d_time=d["d_time"],
        embedding=EmbeddingConfig(**d["embedding"]),
        staleness=StalenessConfig(**d["staleness"]),
        similarity=SimilarityConfig(**d["similarity"]),
        train=TrainConfig(**d["train"]),
        seed=d["seed"],
    )


def save_checkpoint(state: EngineState, path, extra: Optional[dict] = None) -> None:
    """Serialize parameters, optimizer state, memory, adjacency, pending
    messages, and random-stream state; load restores identical behavior."""
    arrays: Dict[str, np.ndarray] = {}
    for name in state.params.names():
        arrays[f"param/{name}"] = state.params.arrays[name]
        if name in state.adam.m:
            arrays[f"adam_m/{name}"] = state.adam.m[name]
            arrays[f"adam_v/{name}"] = state.adam.v[name]
    arrays["memory/state"] = state.memory.states
    arrays["memory/last_update"] = state.memory.last_update
    recs, eids, feats = state.adj.snapshot_arrays()
    arrays["adjacency/records"] = recs
    arrays["adjacency/event_ids"] = eids
    arrays["adjacency/features"] = feats
    if state.pending is not None:
        arrays["pending/targets"] = state.pending.targets.astype(np.float64)
        arrays["pending/others"] = state.pending.others.astype(np.float64)
        arrays["pending/deltas"] = state.pending.deltas
        arrays["pending/timestamps"] = state.pending.timestamps
        arrays["pending/features"] = state.pending.features

    config_json = json.dumps(_config_dict(state, extra)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(config_json)))
        fh.write(config_json)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            _write_array(fh, name, arrays[name])


@dataclass
class LoadedCheckpoint:
    state: EngineState
    extra: dict


def load_checkpoint(path) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        magic = _read_exactly(fh, 4, "magic")
        if magic != MAGIC:
            raise CheckpointError("bad header: wrong magic bytes")
        (version,) = struct.unpack("<I", _read_exactly(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointError(f"version mismatch: file has {version}, expected {VERSION}")
        (cfg_len,) = struct.unpack("<Q", _read_exactly(fh, 8, "config length"))
        config = json.loads(_read_exactly(fh, cfg_len, "config block").decode("utf-8"))
        (n_arrays,) = struct.unpack("<I", _read_exactly(fh, 4, "array count"))
        arrays = dict(_read_array(fh) for _ in range(n_arrays))

    cfg = _engine_config_from_dict(config["engine"])
    num_sources = config["num_sources"]
    num_destinations = config["num_destinations"]
    num_nodes = num_sources + num_destinations

    params = ParameterStore(seed=config["param_seed"])
    for name in config["param_names"]:
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"missing array for field {key}")
        params.arrays[name] = arrays[key]

    adam = AdamState(step=config["adam_step"])
    for name in config["param_names"]:
        if f"adam_m/{name}" in arrays:
            adam.m[name] = arrays[f"adam_m/{name}"]
            adam.v[name] = arrays[f"adam_v/{name}"]

    mem_state = arrays["memory/state"]
    if mem_state.shape != (num_nodes, cfg.d_mem):
        raise CheckpointError(
            f"shape mismatch in field memory/state: {mem_state.shape}"
        )
    memory = MemoryTable(num_nodes, cfg.d_mem)
    memory.states = mem_state
    memory.last_update = arrays["memory/last_update"]

    adj = TemporalAdjacency.from_snapshot(
        arrays["adjacency/records"], arrays["adjacency/event_ids"],
        arrays["adjacency/features"],
    )

    pending = None
    if config["has_pending"]:
        pending = PendingMessages(
            targets=arrays["pending/targets"].astype(np.int64),
            others=arrays["pending/others"].astype(np.int64),
            deltas=arrays["pending/deltas"],
            timestamps=arrays["pending/timestamps"],
            features=arrays["pending/features"],
        )

    rng = np.random.default_rng()
    rng.bit_generator.state = config["rng_state"]

    state = EngineState(
        cfg=cfg,
        params=params,
        adam=adam,
        memory=memory,
        adj=adj,
        rng=rng,
        num_sources=num_sources,
        num_destinations=num_destinations,
        d_edge=config["d_edge"],
        pending=pending,
    )
    return LoadedCheckpoint(state=state, extra=config.get("extra", {}))
