import io
import json
import math

import numpy as np
import pytest

from nar.model import ModelConfig
from nar.trainer import (NumericError, TrainConfig, build_labels, kendall_tau, one_hot,
                         tier_metrics, train, validate)


def small_setup(space, n=120, seed=0):
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(space), size=n, replace=False)
    recs = [space.records[i] for i in idx]
    lay = space.layout
    mc = ModelConfig(layers=1, d_model=16, heads=2, ffn=32, patches=lay.channels,
                     resolution=lay.nodes, dropout=0.0)
    return recs, lay, mc


class TestLabels:
    def test_even_split(self):
        y = np.arange(10)[::-1] / 10.0
        np.testing.assert_array_equal(build_labels(y, 5), [0, 0, 1, 1, 2, 2, 3, 3, 4, 4])

    def test_remainder_to_top_tiers(self):
        labels = build_labels(np.linspace(1, 0, 7), 5)
        assert np.bincount(labels).tolist() == [2, 2, 1, 1, 1]

    def test_all_ties_use_ids(self):
        ids = ["g", "c", "a", "f", "b", "e", "d"]
        labels = build_labels(np.full(7, 0.5), 5, ids)
        assert np.bincount(labels).tolist() == [2, 2, 1, 1, 1]
        by_id = dict(zip(ids, labels))
        assert [by_id[i] for i in "abcdefg"] == [0, 0, 1, 1, 2, 3, 4]

    def test_too_small(self):
        with pytest.raises(ValueError):
            build_labels([0.1, 0.2], 5)

    def test_one_hot(self):
        np.testing.assert_array_equal(one_hot(np.array([2, 0]), 3), [[0, 0, 1], [1, 0, 0]])


class TestKendall:
    def test_ordered(self):
        assert kendall_tau([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0

    def test_reversed(self):
        assert kendall_tau([4, 3, 2, 1], [10, 20, 30, 40]) == -1.0

    def test_null(self):
        rng = np.random.default_rng(0)
        assert abs(kendall_tau(rng.normal(size=10_000), rng.normal(size=10_000))) < 0.05

    def test_brute_force(self):
        rng = np.random.default_rng(3)
        s = rng.integers(0, 5, 40).astype(float)
        t = rng.integers(0, 6, 40).astype(float)
        c = d = n = 0
        for i in range(40):
            for j in range(i + 1, 40):
                if t[i] == t[j]:
                    continue
                n += 1
                prod = (s[i] - s[j]) * (t[i] - t[j])
                c += prod > 0
                d += prod < 0
        assert kendall_tau(s, t) == pytest.approx((c - d) / n, abs=1e-15)

    def test_all_ties(self):
        with pytest.raises(ValueError):
            kendall_tau([1, 2, 3], [5, 5, 5])


class TestTierMetrics:
    def test_perfect(self):
        t = np.arange(100) % 5
        assert tier_metrics(t, t) == {"tier_accuracy": 1.0, "adjacent_tier_accuracy": 1.0}

    def test_chance(self):
        rng = np.random.default_rng(1)
        truth = rng.integers(0, 5, 20_000)
        m = tier_metrics(rng.integers(0, 5, 20_000), truth)
        assert m["tier_accuracy"] == pytest.approx(0.2, abs=0.01)
        # within one of a uniform draw: 13 of 25 pairs
        assert m["adjacent_tier_accuracy"] == pytest.approx(13 / 25, abs=0.01)


class TestTrain:
    def test_one_iteration_bookkeeping(self, small_space):
        recs, lay, mc = small_setup(small_space, n=10)
        res = train(recs, lay, mc, TrainConfig(batch_size=10, epochs=1, warmup=1))
        assert len(res.log) == 1
        for b in res.buckets:
            assert len(b.flops_log) == len(b.params_log) == 1
            assert b.count == 2
        assert sum(sum(b.op_counts.values()) for b in res.buckets) == sum(len(r.node_ops) for r in recs)

    def test_log_lines(self, small_space):
        recs, lay, mc = small_setup(small_space, n=40)
        fh = io.StringIO()
        res = train(recs, lay, mc, TrainConfig(batch_size=16, epochs=2, warmup=2), fh)
        lines = [json.loads(l) for l in fh.getvalue().splitlines()]
        # 40 records in batches of 16: 16, 16, 8 per epoch
        assert [l["iteration"] for l in lines] == [1, 2, 3, 4, 5, 6]
        for l in lines:
            assert l["total"] == pytest.approx(l["L2"] + mc.lam * l["L1"], rel=1e-12)
        assert lines == res.log

    def test_deterministic(self, small_space):
        recs, lay, mc = small_setup(small_space, n=60)
        cfg = TrainConfig(batch_size=20, epochs=2, warmup=3, seed=5)
        a = train(recs, lay, mc, cfg)
        b = train(recs, lay, mc, cfg)
        assert a.log == b.log
        for x, y in zip(a.buckets, b.buckets):
            assert x.embedding.tobytes() == y.embedding.tobytes()
            assert x.to_header() == y.to_header()
        for k in a.model.params:
            assert a.model.params[k].data.tobytes() == b.model.params[k].data.tobytes()

    def test_loss_decreases(self, small_space):
        recs, lay, mc = small_setup(small_space, n=200)
        res = train(recs, lay, mc, TrainConfig(batch_size=40, epochs=8, warmup=5, beta2=0.99,
                                               weight_decay=1e-2))
        assert res.epoch_losses[-1] < res.epoch_losses[0]

    def test_layout_mismatch(self, small_space):
        recs, lay, _ = small_setup(small_space, n=20)
        with pytest.raises(ValueError, match="patches"):
            train(recs, lay, ModelConfig(layers=1, d_model=16, heads=2, ffn=32), TrainConfig())

    def test_missing_accuracy(self, small_space):
        import copy
        recs, lay, mc = small_setup(small_space, n=20)
        recs = [copy.deepcopy(r) for r in recs]
        recs[3].accuracy = None
        with pytest.raises(ValueError, match=recs[3].id):
            train(recs, lay, mc, TrainConfig(batch_size=10, epochs=1))

    def test_nonfinite_learning_rate(self, small_space):
        recs, lay, mc = small_setup(small_space, n=20)
        with pytest.raises(NumericError, match="learning rate at iteration 1"):
            train(recs, lay, mc, TrainConfig(batch_size=10, epochs=1, lr_scale=math.inf))

    def test_nonfinite_loss(self, small_space, monkeypatch):
        import nar.trainer as tr
        from nar.numcore import Tensor
        recs, lay, mc = small_setup(small_space, n=20)
        monkeypatch.setattr(tr, "ranking_loss", lambda yhat, y: Tensor(np.array(np.nan)))
        with pytest.raises(NumericError, match="loss at iteration 1"):
            train(recs, lay, mc, TrainConfig(batch_size=10, epochs=1))

    def test_profiles_match_published_settings(self):
        from nar.config import build_config
        c101 = build_config(profile="nb101").train_config()
        assert (c101.batch_size, c101.epochs, c101.warmup, c101.beta2, c101.weight_decay) == (256, 35, 50, 0.982, 5e-4)
        c201 = build_config(profile="nb201").train_config()
        assert (c201.batch_size, c201.epochs, c201.warmup, c201.beta2, c201.weight_decay) == (128, 55, 30, 0.99, 1e-2)


def test_validate_reports_all_metrics(small_space):
    recs, lay, mc = small_setup(small_space, n=60)
    res = train(recs, lay, mc, TrainConfig(batch_size=20, epochs=1, warmup=2))
    m, detail = validate(res.model, res.buckets, res.norm, small_space.records[:50], lay)
    assert set(m) == {"n", "kendall_tau", "tier_accuracy", "adjacent_tier_accuracy"}
    assert len(detail["score"]) == 50
    assert np.bincount(detail["true_tier"]).tolist() == [10] * 5
