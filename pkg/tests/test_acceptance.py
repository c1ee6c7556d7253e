"""Acceptance gate: ten system-level properties, one printed verdict each.

Every test prints a single PASS or FAIL line (bypassing output capture) so a
plain pytest run yields a per-criterion scoreboard.
"""

import dataclasses
import math
import sys
import time
from contextlib import contextmanager

import numpy as np

from stgn import autodiff as ad
from stgn.autodiff import Tape
from stgn.checkpoint import load_checkpoint, save_checkpoint
from stgn.embedding import (
    EmbeddingConfig,
    add_model_params,
    attention_embed,
    attention_rows,
    embed_batch,
    time_encode,
)
from stgn.harness import ABLATION_COLUMNS, run_ablation, run_experiment
from stgn.ingest import EventStream, SplitSpec, generate_synthetic
from stgn.learn import (
    EngineConfig,
    TrainConfig,
    batch_loss,
    build_parameter_store,
    decode_logits,
    sample_negatives,
    state_for_stream,
    train,
    train_one_batch,
)
from stgn.memory import NEVER, MemoryTable, add_gru_params, gru_cell
from stgn.params import ParameterStore, gradient_check
from stgn.similarity import (
    BallTree,
    CandidateSet,
    SimilarityConfig,
    build_index,
    collect_candidates,
)
from stgn.staleness import StalenessConfig, StalenessReport, quantile_threshold
from stgn.temporal import TemporalAdjacency


@contextmanager
def criterion(num, desc):
    import conftest

    try:
        yield
    except BaseException:
        line = f"criterion {num:2d} FAIL  {desc}"
        conftest.acceptance_lines.append(line)
        print(line, file=sys.__stdout__, flush=True)
        raise
    line = f"criterion {num:2d} PASS  {desc}"
    conftest.acceptance_lines.append(line)
    print(line, file=sys.__stdout__, flush=True)


def small_engine_config(**kw):
    defaults = dict(
        d_mem=8,
        d_time=4,
        embedding=EmbeddingConfig(layers=1, neighbors=4, heads=2, d_emb=8),
        staleness=StalenessConfig(alpha=0.2),
        similarity=SimilarityConfig(k=1, backend="brute_force"),
        train=TrainConfig(batch_size=25, epochs=1),
        seed=0,
    )
    defaults.update(kw)
    return EngineConfig(**defaults)


# ---------------------------------------------------------------------------
# 1. KNN backend equivalence
# ---------------------------------------------------------------------------

def test_criterion_1_knn_backend_equivalence():
    with criterion(1, "ball tree and brute force agree on (id, distance) lists"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(20260823)
        instances = 0
        while instances < 50:
            n = int(rng.integers(2, 2001))
            dim = int(rng.choice([8, 32, 64]))
            ids = rng.choice(10 * n, size=n, replace=False)
            ids.sort()
            cands = CandidateSet(ids, rng.normal(size=(n, dim)))
            tree = BallTree(cands, leaf_capacity=16)
            for k in (1, 5):
                q = rng.normal(size=dim)
                assert tree.query(q, k) == cands.query(q, k)
                node = int(rng.choice(ids))
                assert tree.query(cands.vectors[ids.tolist().index(node)], k,
                                  exclude={node}) == \
                    cands.query(cands.vectors[ids.tolist().index(node)], k,
                                exclude={node})
            instances += 1
        elapsed = time.perf_counter() - t0
        assert elapsed < 30.0, f"took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. quantile oracle and shift invariance
# ---------------------------------------------------------------------------

def test_criterion_2_quantile_oracle():
    with criterion(2, "quantile matches full-sort rank oracle; stale set shift-invariant"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)

        def oracle(values, p):
            s = sorted(values)
            rank = max(1, min(len(s), math.ceil(p * len(s) - 1e-9)))
            return s[rank - 1]

        for _ in range(1000):
            n = int(rng.integers(1, 80))
            vals = rng.uniform(0, 1000, size=n)
            if rng.random() < 0.3 and n > 1:
                vals[rng.integers(n)] = vals[0]  # inject a tie
            vals = vals.tolist()
            for p in (0.7, 0.8, 0.975):
                assert quantile_threshold(vals, p) == oracle(vals, p)

        # shift invariance, exact: dyadic values and shifts add without rounding
        for _ in range(300):
            n = int(rng.integers(1, 60))
            vals = (rng.integers(0, 2**16, size=n) / 64.0).tolist()
            shift = float(rng.integers(-2**12, 2**12)) / 64.0
            p = float(rng.choice([0.7, 0.8, 0.975]))
            th = quantile_threshold(vals, p)
            th_s = quantile_threshold([v + shift for v in vals], p)
            stale = {i for i, v in enumerate(vals) if v >= th}
            stale_s = {i for i, v in enumerate(vals) if v + shift >= th_s}
            assert stale == stale_s
        elapsed = time.perf_counter() - t0
        assert elapsed < 5.0, f"took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 3. gradient checks
# ---------------------------------------------------------------------------

def _attention_world(seed=0):
    cfg = small_engine_config()
    rng = np.random.default_rng(seed)
    params = build_parameter_store(cfg, d_edge=2)
    mem = MemoryTable(12, cfg.d_mem)
    mem.states[:] = rng.normal(size=(12, cfg.d_mem))
    mem.last_update[:] = 0.0
    adj = TemporalAdjacency()
    from stgn.ingest import Event

    t = 0.0
    for i in range(40):
        t += float(rng.exponential())
        adj.insert_interaction(Event(
            event_id=i, source=int(rng.integers(0, 6)),
            destination=int(rng.integers(6, 12)), timestamp=t,
            features=rng.normal(size=2),
        ))
    return cfg, params, mem, adj, t


def test_criterion_3_gradient_checks():
    with criterion(3, "finite differences confirm gradients of every component"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        reports = {}

        # GRU cell
        cfg = small_engine_config()
        payload = cfg.payload_dim_base + 2
        gru_params = ParameterStore(seed=1)
        add_gru_params(gru_params, cfg.d_mem, payload)
        x = rng.normal(size=(5, payload))
        h = rng.normal(size=(5, cfg.d_mem))
        w = rng.normal(size=(5, cfg.d_mem))

        def gru_forward(pvars, tape):
            out = gru_cell(pvars, tape.const(x), tape.const(h))
            return ad.sum_(ad.mul(out, tape.const(w)))

        reports["gru"] = gradient_check(gru_forward, gru_params, probes=200)

        # attention layer (includes the time encoder inside the stack)
        cfg, params, mem, adj, t_end = _attention_world()
        nodes = [0, 3, 8]
        times = [t_end + 0.5] * 3
        w_attn = rng.normal(size=(3, cfg.embedding.d_emb))
        attn_names = [n for n in params.names() if n.startswith("attn/")]

        def attn_forward(pvars, tape):
            out = attention_rows(nodes, times, tape.const(mem.states), adj,
                                 pvars, cfg.embedding, 2)
            return ad.sum_(ad.mul(out, tape.const(w_attn)))

        reports["attention"] = gradient_check(attn_forward, params,
                                              probes=200, names=attn_names)

        # time encoder
        dts = rng.uniform(0, 20, size=12)
        w_t = rng.normal(size=(12, cfg.d_time))

        def time_forward(pvars, tape):
            return ad.sum_(ad.mul(time_encode(pvars, dts), tape.const(w_t)))

        reports["time"] = gradient_check(
            time_forward, params, probes=200,
            names=["time/freq", "time/phase"],
        )

        # decoder
        src = rng.normal(size=(6, cfg.embedding.d_emb))
        dst = rng.normal(size=(6, cfg.embedding.d_emb))
        labels = np.array([1.0, 0.0, 1.0, 1.0, 0.0, 0.0])

        def dec_forward(pvars, tape):
            z = decode_logits(pvars, tape.const(src), tape.const(dst))
            return ad.bce_with_logits_mean(z, labels)

        dec_names = [n for n in params.names() if n.startswith("dec/")]
        reports["decoder"] = gradient_check(dec_forward, params,
                                            probes=200, names=dec_names)

        # end-to-end batch loss with pending messages and staleness active
        stream = generate_synthetic(num_users=15, num_items=15,
                                    num_communities=3, num_events=150, seed=9)
        state = state_for_stream(small_engine_config(), stream)
        train_one_batch(state, stream.slice(0, 25))
        train_one_batch(state, stream.slice(25, 50))
        batch = stream.slice(50, 75)
        negatives = sample_negatives(batch, state.num_sources,
                                     state.num_destinations,
                                     np.random.default_rng(3))

        def loss_forward(pvars, tape):
            loss, _ = batch_loss(tape, pvars, state.memory, state.pending,
                                 state.adj, batch, negatives, state.cfg,
                                 state.d_edge)
            return loss

        reports["batch_loss"] = gradient_check(loss_forward, state.params,
                                               probes=200)

        for name, rep in reports.items():
            assert rep.max_rel_err < 1e-4, (
                f"{name}: rel err {rep.max_rel_err:.2e} at "
                f"{rep.worst_name}{rep.worst_index}"
            )
        elapsed = time.perf_counter() - t0
        assert elapsed < 120.0, f"took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 4. augmentation composition and disabled-path identity
# ---------------------------------------------------------------------------

def test_criterion_4_augmentation_composition():
    with criterion(4, "stale embedding decomposes bitwise; disabled staleness "
                      "is bit-identical to baseline"):
        # part A: forced-stale node decomposes into (self + similar) + attention
        for mode in ("memory", "attention"):
            cfg = EmbeddingConfig(layers=1, neighbors=4, heads=2, d_emb=8,
                                  similar_mode=mode)
            rng = np.random.default_rng(13)
            params = ParameterStore(seed=13)
            add_model_params(params, cfg, 8, 2, 4)
            mem = MemoryTable(12, 8)
            mem.states[:] = rng.normal(size=(12, 8))
            mem.last_update[:] = 0.0
            adj = TemporalAdjacency()
            from stgn.ingest import Event

            t = 0.0
            for i in range(30):
                t += float(rng.exponential())
                adj.insert_interaction(Event(
                    event_id=i, source=int(rng.integers(0, 6)),
                    destination=int(rng.integers(6, 12)), timestamp=t,
                    features=rng.normal(size=2),
                ))
            batch = EventStream(
                sources=np.array([2]), destinations=np.array([9]),
                timestamps=np.array([t + 1.0]), features=np.zeros((1, 2)),
                num_sources=6, num_destinations=6, validate=False,
            )
            report = StalenessReport(deltas={2: 5.0}, threshold=5.0,
                                     stale_set={2})
            sim_cfg = SimilarityConfig(k=1, backend="brute_force")
            index = build_index(collect_candidates(mem), sim_cfg)
            vecs = embed_batch(batch, mem, adj, params, cfg, report=report,
                               sim_index=index, sim_cfg=sim_cfg)
            gat = attention_embed(2, t + 1.0, mem, adj, params, cfg, 2).values
            (sim_id, _), = index.query(mem.states[2], 1, exclude={2})
            if mode == "memory":
                sim_term = mem.states[sim_id]
            else:
                sim_term = attention_embed(sim_id, t + 1.0, mem, adj, params,
                                           cfg, 2).values
            expected = (mem.states[2] + sim_term) + gat
            assert np.array_equal(vecs[2].values, expected), mode

        # part B: two disabled-staleness configs that differ only in dormant
        # staleness and similarity settings produce bit-identical runs
        stream = generate_synthetic(num_users=15, num_items=15,
                                    num_communities=3, num_events=400, seed=9)
        cfg_a = small_engine_config(
            staleness=StalenessConfig(alpha=0.2, enabled=False),
            similarity=SimilarityConfig(k=1, backend="brute_force"),
        )
        cfg_b = small_engine_config(
            staleness=StalenessConfig(alpha=0.01, apply_to="all_endpoints",
                                      enabled=False),
            similarity=SimilarityConfig(k=3, backend="ball_tree"),
        )
        state_a = state_for_stream(cfg_a, stream)
        state_b = state_for_stream(cfg_b, stream)
        train(state_a, stream, epochs=2)
        train(state_b, stream, epochs=2)
        for name in state_a.params.names():
            assert np.array_equal(state_a.params.arrays[name],
                                  state_b.params.arrays[name]), name
        assert np.array_equal(state_a.memory.states, state_b.memory.states)
        assert np.array_equal(state_a.memory.last_update,
                              state_b.memory.last_update)


# ---------------------------------------------------------------------------
# 5. end-to-end learnability
# ---------------------------------------------------------------------------

def test_criterion_5_end_to_end_learnability():
    with criterion(5, "baseline model reaches test AUC >= 0.75 on the "
                      "community stream"):
        stream = generate_synthetic(num_users=200, num_items=200,
                                    num_communities=8, num_events=20000,
                                    intra_prob=0.9, seed=42)
        cfg = EngineConfig(
            staleness=StalenessConfig(alpha=0.025, enabled=False),
            seed=0,
        )
        res = run_experiment(stream, cfg, SplitSpec(seed=0), epochs=10)
        assert res.test.auc >= 0.75, f"test AUC {res.test.auc:.4f}"


# ---------------------------------------------------------------------------
# 6. staleness parity across backends
# ---------------------------------------------------------------------------

def test_criterion_6_staleness_parity():
    with criterion(6, "augmented runs stay within +/-0.03 AUC of baseline; "
                      "backends agree exactly"):
        dorm = [(u, 2000.0, 9000.0) for u in range(20)]  # 10% of users
        stream = generate_synthetic(num_users=200, num_items=200,
                                    num_communities=8, num_events=20000,
                                    intra_prob=0.9, seed=42, dormancy=dorm)
        for seed in (0, 1, 2):
            aucs = {}
            for tag, enabled, backend in (
                ("baseline", False, "ball_tree"),
                ("ball_tree", True, "ball_tree"),
                ("brute_force", True, "brute_force"),
            ):
                cfg = EngineConfig(
                    seed=seed,
                    staleness=StalenessConfig(alpha=0.025, enabled=enabled),
                    similarity=SimilarityConfig(k=1, backend=backend),
                )
                aucs[tag] = run_experiment(stream, cfg, SplitSpec(seed=0),
                                           epochs=10).test.auc
            for tag in ("ball_tree", "brute_force"):
                diff = aucs[tag] - aucs["baseline"]
                assert abs(diff) <= 0.03, f"seed {seed} {tag}: diff {diff:+.4f}"
            assert aucs["ball_tree"] == aucs["brute_force"], (
                f"seed {seed}: backends disagree"
            )


# ---------------------------------------------------------------------------
# 7. ablation harness
# ---------------------------------------------------------------------------

def test_criterion_7_ablation_harness():
    with criterion(7, "quantile ablation yields a well-formed, reproducible "
                      "table"):
        stream = generate_synthetic(num_users=20, num_items=20,
                                    num_communities=4, num_events=1000,
                                    intra_prob=0.95, seed=5)
        cfg = small_engine_config(
            train=TrainConfig(batch_size=50, epochs=1),
        )
        quantiles = [0.975, 0.8, 0.7]
        t1 = run_ablation(quantiles, stream, cfg, SplitSpec(seed=0))
        t2 = run_ablation(quantiles, stream, cfg, SplitSpec(seed=0))
        assert t1.columns == ABLATION_COLUMNS
        assert len(t1.rows) == 1 + len(quantiles)
        assert t1.rows[0][:2] == ("baseline", "-")
        assert [float(r[1]) for r in t1.rows[1:]] == quantiles
        for row in t1.rows:
            assert row[0] in ("baseline", "ball_tree", "brute_force")
            assert 0.0 <= float(row[2]) <= 1.0
            assert 0.0 <= float(row[3]) <= 1.0
        assert t1.rows == t2.rows
        csv = t1.to_csv().strip().split("\n")
        assert csv[0] == "model,quantile,AUC,precision"
        assert len(csv) == 1 + len(t1.rows)


# ---------------------------------------------------------------------------
# 8. bookkeeping oracles
# ---------------------------------------------------------------------------

def test_criterion_8_bookkeeping_oracles():
    with criterion(8, "replayed state matches brute-force log scans"):
        from conftest import replay_events
        from stgn.embedding import TimeEncoder, add_time_params

        stream = generate_synthetic(num_users=40, num_items=40,
                                    num_communities=4, num_events=1000, seed=3)
        params = ParameterStore(seed=0)
        add_time_params(params, 4)
        add_gru_params(params, 8, 2 * 8 + 4 + stream.d_edge)
        mem = MemoryTable(stream.num_sources + stream.num_destinations, 8)
        adj = TemporalAdjacency()
        replay_events(stream, mem, params, TimeEncoder(params), adj=adj)

        events = stream.events
        # last_update equals the time of each node's final event
        expected_last = {}
        for e in events:
            expected_last[e.source] = e.timestamp
            expected_last[e.destination] = e.timestamp
        for node in range(mem.num_nodes):
            want = expected_last.get(node, NEVER)
            assert mem.last_update[node] == want, node
        # initialized set equals the touched set
        assert set(mem.initialized_ids().tolist()) == set(expected_last)
        # neighbor lists match a full log scan at random probe points
        rng = np.random.default_rng(17)
        t_end = events[-1].timestamp
        for _ in range(200):
            node = int(rng.choice(list(expected_last)))
            t = float(rng.uniform(0, t_end * 1.05))
            n = int(rng.integers(1, 15))
            brute = []
            for e in events:
                if e.timestamp >= t:
                    continue
                if e.source == node:
                    brute.append((e.destination, e.event_id, e.timestamp))
                elif e.destination == node:
                    brute.append((e.source, e.event_id, e.timestamp))
            brute = brute[-n:]
            got = [(r.neighbor, r.event_id, r.timestamp)
                   for r in adj.last_n_neighbors(node, t, n)]
            assert got == brute


# ---------------------------------------------------------------------------
# 9. metric oracles
# ---------------------------------------------------------------------------

def test_criterion_9_metric_oracles():
    with criterion(9, "AUC and average precision match definitional oracles "
                      "to 1e-12"):
        from stgn.metrics import average_precision, roc_auc
        from test_metrics import definitional_ap, pairwise_auc

        rng = np.random.default_rng(23)
        for _ in range(100):
            n = int(rng.integers(4, 60))
            scores = np.round(rng.uniform(size=n), 1)
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                labels[0] = 1 - labels[0]
            assert abs(roc_auc(scores, labels)
                       - pairwise_auc(scores, labels)) < 1e-12
            assert abs(average_precision(scores, labels)
                       - definitional_ap(scores, labels)) < 1e-12


# ---------------------------------------------------------------------------
# 10. checkpoint round trip
# ---------------------------------------------------------------------------

def test_criterion_10_checkpoint_round_trip(tmp_path):
    with criterion(10, "save/load/one-batch equals the uninterrupted run "
                       "bit-for-bit"):
        stream = generate_synthetic(num_users=15, num_items=15,
                                    num_communities=3, num_events=200, seed=9)
        state = state_for_stream(small_engine_config(), stream)
        for lo in (0, 25, 50):
            train_one_batch(state, stream.slice(lo, lo + 25))
        path = tmp_path / "mid.ckpt"
        save_checkpoint(state, path)

        next_batch = stream.slice(75, 100)
        stats_a = train_one_batch(state, next_batch)
        resumed = load_checkpoint(path).state
        stats_b = train_one_batch(resumed, next_batch)

        assert stats_a.loss == stats_b.loss
        for name in state.params.names():
            assert np.array_equal(state.params.arrays[name],
                                  resumed.params.arrays[name]), name
        assert np.array_equal(state.memory.states, resumed.memory.states)
        assert np.array_equal(state.memory.last_update,
                              resumed.memory.last_update)
        assert np.array_equal(state.pending.targets, resumed.pending.targets)
        assert np.array_equal(state.pending.deltas, resumed.pending.deltas)
