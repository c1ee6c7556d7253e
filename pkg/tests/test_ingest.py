import numpy as np
import pytest

from stgn.ingest import (
    EventStream,
    GenerationError,
    ParseError,
    SplitSpec,
    ValidationError,
    batch_iter,
    chronological_split,
    generate_synthetic,
    parse_jodie_csv,
    write_jodie_csv,
)


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class TestParse:
    def test_three_row_file(self, tmp_path):
        f = tmp_path / "d.csv"
        write_lines(f, [
            "source,destination,timestamp,state_label,f_1,f_2",
            "0,0,1.0,0,0.5,0.25",
            "1,1,2.0,0,0.1,0.2",
            "0,1,2.0,1,0.0,0.0",
        ])
        s = parse_jodie_csv(f)
        assert len(s) == 3
        assert s.d_edge == 2
        assert s.num_sources == 2 and s.num_destinations == 2
        # destination offsetting makes id spaces disjoint
        assert s.destinations.tolist() == [2, 3, 3]
        np.testing.assert_array_equal(s.features[0], [0.5, 0.25])

    def test_zero_feature_columns(self, tmp_path):
        f = tmp_path / "d.csv"
        write_lines(f, ["source,destination,timestamp,state_label",
                        "0,0,1.0,0", "1,0,3.0,0"])
        s = parse_jodie_csv(f)
        assert s.d_edge == 0
        assert s.features.shape == (2, 0)

    def test_decreasing_timestamp_names_line(self, tmp_path):
        f = tmp_path / "d.csv"
        rows = ["source,destination,timestamp,state_label"]
        times = [1, 2, 3, 4, 5, 6, 5, 8, 9, 10]  # row 7 goes backwards
        rows += [f"0,0,{t}.0,0" for t in times]
        write_lines(f, rows)
        with pytest.raises(ValidationError, match="line 8"):
            parse_jodie_csv(f)

    def test_malformed_row_names_line(self, tmp_path):
        f = tmp_path / "d.csv"
        write_lines(f, ["source,destination,timestamp,state_label,f_1",
                        "0,0,1.0,0,0.5", "0,oops,2.0,0,0.5"])
        with pytest.raises(ParseError, match="line 3"):
            parse_jodie_csv(f)

    def test_wrong_column_count_names_line(self, tmp_path):
        f = tmp_path / "d.csv"
        write_lines(f, ["source,destination,timestamp,state_label,f_1",
                        "0,0,1.0,0,0.5", "0,1,2.0,0,0.5,0.7"])
        with pytest.raises(ParseError, match="line 3"):
            parse_jodie_csv(f)

    def test_round_trip(self, tmp_path, small_stream):
        f = tmp_path / "rt.csv"
        write_jodie_csv(small_stream, f)
        back = parse_jodie_csv(f)
        np.testing.assert_array_equal(back.sources, small_stream.sources)
        np.testing.assert_array_equal(back.destinations, small_stream.destinations)
        np.testing.assert_array_equal(back.timestamps, small_stream.timestamps)
        np.testing.assert_array_equal(back.features, small_stream.features)


class TestSynthetic:
    def test_intra_prob_one_keeps_events_in_community(self):
        s = generate_synthetic(10, 10, 2, 300, intra_prob=1.0, seed=5)
        user_comm = s.sources // 5
        item_comm = (s.destinations - s.num_sources) // 5
        np.testing.assert_array_equal(user_comm, item_comm)

    def test_dormant_user_emits_no_events_in_window(self):
        s = generate_synthetic(5, 5, 1, 400, dormancy=[(0, 10.0, 50.0)], seed=2)
        mask = (s.sources == 0) & (s.timestamps >= 10.0) & (s.timestamps <= 50.0)
        assert not mask.any()
        # the user is active outside the window
        assert (s.sources == 0).any()

    def test_seed_determinism(self):
        a = generate_synthetic(8, 8, 2, 200, seed=7)
        b = generate_synthetic(8, 8, 2, 200, seed=7)
        np.testing.assert_array_equal(a.sources, b.sources)
        np.testing.assert_array_equal(a.destinations, b.destinations)
        np.testing.assert_array_equal(a.timestamps, b.timestamps)
        np.testing.assert_array_equal(a.features, b.features)

    def test_different_seeds_differ(self):
        a = generate_synthetic(8, 8, 2, 200, seed=7)
        b = generate_synthetic(8, 8, 2, 200, seed=8)
        assert not np.array_equal(a.sources, b.sources) or not np.array_equal(
            a.timestamps, b.timestamps
        )

    def test_community_must_divide(self):
        with pytest.raises(GenerationError):
            generate_synthetic(10, 10, 3, 10)

    def test_all_users_dormant_is_an_error(self):
        with pytest.raises(GenerationError):
            generate_synthetic(2, 2, 1, 50,
                               dormancy=[(0, 0.0, 1e9), (1, 0.0, 1e9)], seed=0)


class TestSplit:
    def make_uniform(self, n=100):
        return EventStream(
            sources=np.arange(n) % 10,
            destinations=10 + (np.arange(n) % 7),
            timestamps=np.arange(n, dtype=float),
            features=np.zeros((n, 1)),
            num_sources=10,
            num_destinations=7,
        )

    def test_quantile_sizes(self):
        s = self.make_uniform()
        res = chronological_split(s, SplitSpec(0.7, 0.15, new_node_frac=0.0))
        assert (len(res.train), len(res.val), len(res.test)) == (70, 15, 15)

    def test_no_new_nodes_is_noop(self):
        s = self.make_uniform()
        res = chronological_split(s, SplitSpec(0.7, 0.15, new_node_frac=0.0))
        assert res.new_nodes == frozenset()
        assert not res.val_inductive_mask.any()
        assert not res.test_inductive_mask.any()

    def test_new_nodes_absent_from_train(self, small_stream):
        res = chronological_split(small_stream, SplitSpec(new_node_frac=0.1, seed=3))
        assert res.new_nodes
        train_nodes = res.train.node_set()
        assert not (train_nodes & res.new_nodes)

    def test_boundary_ordering(self, small_stream):
        res = chronological_split(small_stream, SplitSpec(seed=3))
        assert res.train.timestamps.max() <= res.val.timestamps.min()
        assert res.val.timestamps.max() <= res.test.timestamps.min()

    def test_inductive_masks_match_new_node_touches(self, small_stream):
        res = chronological_split(small_stream, SplitSpec(new_node_frac=0.1, seed=3))
        for split, mask in ((res.val, res.val_inductive_mask),
                            (res.test, res.test_inductive_mask)):
            for i, ev in enumerate(split):
                touches = ev.source in res.new_nodes or ev.destination in res.new_nodes
                assert touches == bool(mask[i])


class TestBatchIter:
    def test_sizes(self, small_stream):
        batches = list(batch_iter(small_stream.slice(0, 10), 4))
        assert [len(b) for b in batches] == [4, 4, 2]

    def test_single_batch_when_large(self, small_stream):
        batches = list(batch_iter(small_stream, len(small_stream) + 5))
        assert len(batches) == 1 and len(batches[0]) == len(small_stream)

    def test_concatenation_recovers_stream(self, small_stream):
        batches = list(batch_iter(small_stream, 64))
        src = np.concatenate([b.sources for b in batches])
        ts = np.concatenate([b.timestamps for b in batches])
        np.testing.assert_array_equal(src, small_stream.sources)
        np.testing.assert_array_equal(ts, small_stream.timestamps)

    def test_rejects_nonpositive_batch(self, small_stream):
        with pytest.raises(ValidationError):
            list(batch_iter(small_stream, 0))
