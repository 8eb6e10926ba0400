import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from enirec.errors import ConfigError, EmptyDatasetError
from enirec.eval import (ablation_config, collect_ranks, evaluate, evaluate_popularity, format_table,
                         metrics_from_ranks, mrr_at_k, recall_at_k, run_ablation)
from enirec.ingest import DatasetSplit
from enirec.model import Enirec, TrainConfig
from enirec.numerics import init_store

from conftest import make_dataset, randomize


def brute_recall(ranked, target, k):
    hit = 0
    for pos in range(min(k, len(ranked))):
        if ranked[pos] == target:
            hit = 1
    return hit


def brute_mrr(ranked, target, k):
    for pos in range(len(ranked)):
        if ranked[pos] == target:
            return 1.0 / (pos + 1) if pos + 1 <= k else 0.0
    return 0.0


def random_triples(n, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        size = int(rng.integers(1, 40))
        ranked = list(rng.permutation(size))
        target = int(rng.integers(0, size + 3))  # sometimes absent
        yield ranked, target, int(rng.integers(1, 45))


class TestMetrics:
    def test_examples(self):
        ranked = list(range(10))
        assert recall_at_k(ranked, 0, 5) == 1
        assert recall_at_k(ranked, 5, 5) == 0
        assert mrr_at_k(ranked, 3, 5) == 0.25
        assert mrr_at_k(list(range(30)), 20, 20) == 0.0

    def test_brute_force_oracle(self):
        for ranked, target, k in random_triples(10_000):
            assert recall_at_k(ranked, target, k) == brute_recall(ranked, target, k)
            assert mrr_at_k(ranked, target, k) == brute_mrr(ranked, target, k)

    def test_mean_over_instances(self):
        triples = list(random_triples(1000, seed=1))
        got = np.mean([recall_at_k(*t) for t in triples])
        assert got == sum(brute_recall(*t) for t in triples) / 1000

    @given(st.permutations(range(12)), st.integers(0, 11), st.integers(1, 11))
    def test_monotone_in_k(self, ranked, target, k):
        assert recall_at_k(ranked, target, k) <= recall_at_k(ranked, target, k + 1)
        assert mrr_at_k(ranked, target, k) <= mrr_at_k(ranked, target, k + 1)

    def test_from_ranks_matches_lists(self):
        rng = np.random.default_rng(3)
        ranks = rng.integers(1, 40, size=500)
        got = metrics_from_ranks(ranks, (5, 20))
        for k in (5, 20):
            # target 0 placed at position r behind r - 1 other ids
            lists = [list(range(1, r)) + [0] for r in ranks]
            assert got[f"recall@{k}"] == np.mean([recall_at_k(l, 0, k) for l in lists])
            assert got[f"mrr@{k}"] == pytest.approx(np.mean([mrr_at_k(l, 0, k) for l in lists]), rel=1e-15)


def _eval_dataset(n_users=4):
    train = {u: [[1 + (u + k) % 6, 1 + (u + k + 1) % 6, 1 + (u + k + 3) % 6] for k in range(4)]
             for u in range(n_users)}
    test = {u: [[1 + u % 6, 2 + u % 5, 3], [2, 4 + u % 3]] for u in range(n_users)}
    return make_dataset(train, test=test, item_count=7)


def _model(ds, **kw):
    cfg = TrainConfig(d=4, K=2, sample_n=2, seed=1, **kw)
    return Enirec(randomize(init_store(ds.item_count, 4, seed=1)), ds, cfg)


class TestEvaluate:
    def test_order_invariant(self):
        ds = _eval_dataset()
        base = evaluate(_model(ds))
        reversed_test = {u: list(reversed(ss)) for u, ss in reversed(list(ds.split.test.items()))}
        ds.split = DatasetSplit(ds.split.train, ds.split.validation, reversed_test, ds.split.proportions)
        again = evaluate(_model(ds))
        assert again.count == base.count
        for key, value in base.metrics.items():
            assert again.metrics[key] == pytest.approx(value, abs=1e-15)

    def test_counts_every_prefix(self):
        report = evaluate(_model(_eval_dataset()))
        assert report.count == 4 * (2 + 1)

    def test_single_instance(self):
        ds = make_dataset({0: [[1, 2], [2, 3]]}, test={0: [[3, 1]]}, item_count=3)
        model = _model(ds)
        report = evaluate(model, ks=(1, 2, 3))
        scores = model.forward(model.query_session(0, [3])).scores
        ranked = [int(p) + 1 for p in np.argsort(-scores, kind="stable")]
        assert report.count == 1
        for k in (1, 2, 3):
            assert report[f"recall@{k}"] == recall_at_k(ranked, 1, k)
            assert report[f"mrr@{k}"] == mrr_at_k(ranked, 1, k)

    def test_ranks_match_recommend(self):
        ds = _eval_dataset()
        model = _model(ds)
        ranks = collect_ranks(model)
        expected = []
        for s in ds.split.sessions("test"):
            for t in range(1, len(s.items)):
                order = model.recommend(s.__class__(s.user, s.items[:t], s.start_ts, s.ordinal, None, s.sid), 7)
                expected.append(order.index(s.items[t]) + 1)
        assert ranks.tolist() == expected

    def test_empty_split(self):
        ds = make_dataset({0: [[1, 2]]}, item_count=2)
        with pytest.raises(EmptyDatasetError):
            evaluate(_model(ds))

    def test_random_params_near_uniform(self):
        # 100 items, random scores: Recall@20 should sit near 20/100.
        rng = np.random.default_rng(0)
        train = {u: [list(rng.choice(np.arange(1, 101), 5, replace=False)) for _ in range(3)] for u in range(40)}
        test = {u: [list(rng.choice(np.arange(1, 101), 6, replace=False))] for u in range(40)}
        ds = make_dataset(train, test=test, item_count=100)
        cfg = TrainConfig(d=8, K=3, sample_n=5, seed=0)
        report = evaluate(Enirec(init_store(100, 8, seed=0), ds, cfg))
        assert report.count == 200
        # binomial sd at n=200 is about 0.028
        assert abs(report["recall@20"] - 0.2) < 0.1

    def test_report_json_and_table(self):
        report = evaluate(_model(_eval_dataset()))
        report.label = "ENIREC"
        doc = json.loads(report.to_json())
        assert doc["count"] == report.count and set(doc["metrics"]) == {"recall@5", "recall@20", "mrr@5", "mrr@20"}
        table = format_table([report])
        assert table.splitlines()[0] == "model | Recall@5 | Recall@20 | MRR@5 | MRR@20"
        assert table.splitlines()[1].startswith("ENIREC | ")


class TestPopularity:
    def test_ranks_by_train_frequency(self):
        ds = make_dataset({0: [[1, 2, 2], [2, 3]]}, test={0: [[1, 2, 3]]}, item_count=3)
        report = evaluate_popularity(ds, ks=(1, 2))
        # order: 2 (x3), 1 (x1), 3 (x1) by lower index
        assert report.count == 2
        assert report["recall@1"] == 0.5 and report["recall@2"] == 0.5
        assert report["mrr@2"] == 0.5 and report.label == "POP"


class TestAblation:
    @pytest.mark.parametrize("variant,flag", [("a", "no_longterm"), ("b1", "no_topk"),
                                              ("b2", "no_sample"), ("c", "gru_instead_of_gafe")])
    def test_flags(self, variant, flag):
        cfg = ablation_config(variant, TrainConfig())
        assert getattr(cfg, flag)
        assert sum(getattr(cfg, f) for f in ("no_longterm", "no_topk", "no_sample", "gru_instead_of_gafe")) == 1

    def test_unknown(self):
        with pytest.raises(ConfigError):
            ablation_config("z", TrainConfig())

    def test_b1_uses_all_candidates(self):
        ds = _eval_dataset()
        model = _model(ds, no_topk=True)
        current = ds.split.test[0][0]
        cands = model.candidates(current)
        C = model.ensure_index().matrix(cands.session_ids())
        ctx = model.forward(current)
        np.testing.assert_allclose(ctx.sim, (C @ ctx.current) @ C, rtol=1e-12)

    def test_c_runs(self):
        report = run_ablation("c", _eval_dataset(), TrainConfig(d=4, epochs=1, K=2, sample_n=2))
        assert report.label == "ENIREC-c" and report.count > 0
