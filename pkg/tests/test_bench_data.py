import copy
import json

import numpy as np
import pytest

from nar.bench_data import (RecordFileError, SpaceTooLarge, SyntheticSpec, count_structures,
                            generate_synthetic, load_records, oracle_redraw, prune, read_header,
                            record_key, space_from_records, split_indices, structure_key,
                            true_rank, write_records)
from nar.encoding import Family, RecordError


@pytest.fixture(scope="module")
def default_space():
    return generate_synthetic(SyntheticSpec())


def _line(adj, ops, rid="x", cells=9, acc=0.9):
    v = len(ops)
    return json.dumps({"id": rid, "family": "DAG7", "adjacency": adj, "node_ops": ops,
                       "cells": [{"flops": [1.0] * v, "params": [1.0] * v}] * cells,
                       "total_flops": 9.0, "total_params": 9.0,
                       "accuracy": {"validation": acc, "test": acc}})


def _chain(v):
    a = [[0] * v for _ in range(v)]
    for i in range(v - 1):
        a[i][i + 1] = 1
    return a


class TestRecordFiles:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.jsonl"
        p.write_text("")
        assert load_records(p) == []

    def test_node_count_mismatch(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text(_line(_chain(6), [1, 2, 3, 4, 2, 3, 5]) + "\n")
        with pytest.raises(RecordFileError, match="node count mismatch"):
            load_records(p)

    def test_all_problems_reported(self, tmp_path):
        p = tmp_path / "bad.jsonl"
        p.write_text("\n".join([_line(_chain(3), [1, 2, 5], "ok"),
                                _line(_chain(6), [1, 2, 5], "a"),
                                _line(_chain(3), [1, 9, 5], "b")]) + "\n")
        with pytest.raises(RecordFileError) as e:
            load_records(p)
        assert [n for n, _ in e.value.problems] == [2, 3]

    def test_duplicate_ids(self, tmp_path):
        p = tmp_path / "dup.jsonl"
        p.write_text(_line(_chain(3), [1, 2, 5], "same") + "\n" + _line(_chain(3), [1, 3, 5], "same") + "\n")
        with pytest.raises(RecordFileError, match="duplicate"):
            load_records(p)

    def test_unparseable_line(self, tmp_path):
        p = tmp_path / "junk.jsonl"
        p.write_text("{not json\n")
        with pytest.raises(RecordFileError, match="line 1"):
            load_records(p)

    def test_family_filter(self, tmp_path):
        p = tmp_path / "one.jsonl"
        p.write_text(_line(_chain(3), [1, 2, 5]) + "\n")
        with pytest.raises(RecordFileError, match="expected FIXED4"):
            load_records(p, Family.FIXED4)

    def test_round_trip(self, tmp_path, small_space):
        p = tmp_path / "space.jsonl"
        write_records(p, small_space.records[:50], small_space.header())
        back = load_records(p)
        assert read_header(p) == small_space.header()
        for a, b in zip(small_space.records[:50], back):
            assert a.id == b.id and a.node_ops == b.node_ops
            np.testing.assert_array_equal(a.adjacency, b.adjacency)
            for (fa, pa), (fb, pb) in zip(a.cells, b.cells):
                assert fa.tobytes() == np.asarray(fb, dtype=np.float64).tobytes()
                assert pa.tobytes() == np.asarray(pb, dtype=np.float64).tobytes()
            assert a.accuracy == b.accuracy
            assert (a.total_flops, a.total_params) == (b.total_flops, b.total_params)


class TestKeys:
    def test_prune_drops_dangling(self):
        adj = np.zeros((5, 5), dtype=np.int8)
        adj[0, 1] = adj[1, 4] = adj[0, 2] = adj[2, 3] = 1
        pa, ops = prune(adj, (1, 2, 3, 4, 5))
        # node 2 -> 3 never reaches the output
        assert ops == (1, 2, 5)
        assert pa.shape == (3, 3)

    def test_prune_unreachable_output(self):
        adj = np.zeros((3, 3), dtype=np.int8)
        adj[0, 1] = 1
        assert prune(adj, (1, 2, 5)) is None

    def test_keys_unique(self, default_space):
        keys = [record_key(r) for r in default_space.records]
        assert len(set(keys)) == len(keys)

    def test_fixed4_key(self):
        assert structure_key(None, (1, 2, 3, 0, 0, 4), Family.FIXED4) == "e123004"


class TestSynthetic:
    def test_default_is_large_enough(self, default_space):
        assert len(default_space) >= 10_000
        assert len(default_space) == count_structures(SyntheticSpec())

    def test_deterministic(self, small_space):
        again = generate_synthetic(small_space.spec)
        assert again.accuracies.tobytes() == small_space.accuracies.tobytes()
        assert [r.id for r in again.records] == [r.id for r in small_space.records]

    def test_accuracy_range(self, default_space):
        a = default_space.accuracies
        assert (a > 0).all() and (a < 1).all()

    def test_minimal_below_argmax(self, default_space):
        minimal = min(default_space.records, key=lambda r: (r.num_nodes, r.num_edges, r.id))
        assert default_space.accuracy(minimal.id) < default_space.accuracy(default_space.best().id)

    def test_budget(self):
        spec = SyntheticSpec(nodes=6, max_edges=7, budget=1000)
        with pytest.raises(SpaceTooLarge, match="18484"):
            generate_synthetic(spec)

    def test_every_record_valid(self, small_space):
        from nar.encoding import validate_record
        for r in small_space.records:
            validate_record(r, small_space.layout)
            assert prune(r.adjacency, r.node_ops)[1] == r.node_ops

    def test_top_percent_stable_under_noise(self, default_space):
        """Redraw the oracle noise 10 times with the structural weights fixed."""
        n = len(default_space) // 100
        base_rank = np.empty(len(default_space), dtype=np.int64)
        base_rank[np.argsort(-default_space.accuracies, kind="stable")] = np.arange(1, len(default_space) + 1)
        base_top = set(np.argsort(-default_space.accuracies, kind="stable")[:n])
        for seed in range(10):
            acc = oracle_redraw(default_space, 1000 + seed)
            top = np.argsort(-acc, kind="stable")[:n]
            assert len(base_top & set(top)) / n >= 0.8
            assert base_rank[top].max() <= int(1.25 * n)

    def test_resolve(self, small_space):
        rec = small_space.records[17]
        assert small_space.resolve(rec.adjacency, rec.node_ops) is rec


class TestRank:
    def test_argmax_is_one(self, small_space):
        assert true_rank(small_space, small_space.best().id) == (1, 1000 / len(small_space))

    def test_median_permille(self, small_space):
        order = np.argsort(-small_space.accuracies, kind="stable")
        mid = small_space.records[order[len(order) // 2]]
        _, pm = true_rank(small_space, mid.id)
        assert abs(pm - 500) <= 1

    def test_bijection(self, small_space):
        ranks = sorted(small_space.true_rank(r.id)[0] for r in small_space.records)
        assert ranks == list(range(1, len(small_space) + 1))

    def test_ties_broken_by_id(self, small_space):
        clones = []
        for r in small_space.records[:3]:
            c = copy.deepcopy(r)
            c.accuracy = {"validation": 0.5}
            clones.append(c)
        sp = space_from_records(clones, small_space.header())
        ids = sorted(c.id for c in clones)
        assert [sp.true_rank(i)[0] for i in ids] == [1, 2, 3]

    def test_unknown_id(self, small_space):
        with pytest.raises(KeyError):
            small_space.true_rank("nope")


class TestSplits:
    def test_disjoint_and_sized(self):
        tr, va = split_indices(1000, 20, 100, 3)
        assert len(tr) == 20 and len(va) == 100
        assert not set(tr) & set(va)

    def test_seeded(self):
        a = split_indices(500, 10, 50, 1)
        b = split_indices(500, 10, 50, 1)
        assert all((x == y).all() for x, y in zip(a, b))

    def test_oversized(self):
        with pytest.raises(ValueError):
            split_indices(10, 8, 5, 0)


def test_empty_space_rejected():
    with pytest.raises(RecordError):
        space_from_records([])
