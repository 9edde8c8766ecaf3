import math

import numpy as np
import pytest

from lexa.metrics import (
    EvalError,
    MetricReport,
    Qrels,
    RunRanking,
    format_percentages,
    load_qrels,
    metrics_at_k,
    two_stage,
    write_qrels,
)


def brute_metrics(rankings, relevant_sets, k):
    """Independent first-principles computation of all seven values."""
    n = len(relevant_sets)
    precs, recs, f1s, mrrs, aps, ndcgs = [], [], [], [], [], []
    tp_total = fp_total = fn_total = 0
    for qid, rel in relevant_sets.items():
        top = rankings[qid][:k]
        tp = len([c for c in top if c in rel])
        p = tp / k
        r = tp / len(rel)
        precs.append(p)
        recs.append(r)
        f1s.append(0.0 if p + r == 0 else 2 * p * r / (p + r))
        tp_total += tp
        fp_total += k - tp
        fn_total += len(rel) - tp
        rr = 0.0
        for i, c in enumerate(top):
            if c in rel:
                rr = 1.0 / (i + 1)
                break
        mrrs.append(rr)
        ap = 0.0
        hits = 0
        for i, c in enumerate(top):
            if c in rel:
                hits += 1
                ap += hits / (i + 1)
        aps.append(ap / min(len(rel), k) if hits else 0.0)
        dcg = sum(1.0 / math.log2(i + 2) for i, c in enumerate(top) if c in rel)
        n_hits = len([c for c in top if c in rel])
        idcg = sum(1.0 / math.log2(i + 2) for i in range(n_hits))
        ndcgs.append(dcg / idcg if idcg else 0.0)
    pp = tp_total / (tp_total + fp_total) if tp_total + fp_total else 0.0
    pr = tp_total / (tp_total + fn_total) if tp_total + fn_total else 0.0
    return {
        "precision": sum(precs) / n,
        "recall": sum(recs) / n,
        "micro_f1": 0.0 if pp + pr == 0 else 2 * pp * pr / (pp + pr),
        "macro_f1": sum(f1s) / n,
        "mrr": sum(mrrs) / n,
        "map": sum(aps) / n,
        "ndcg": sum(ndcgs) / n,
    }


def random_instance(rng, n_queries=4, pool_size=12, k=5):
    pool = [f"d{i:02d}" for i in range(pool_size)]
    relevant_sets = {}
    rankings = {}
    for q in range(n_queries):
        qid = f"q{q}"
        n_rel = int(rng.integers(1, 6))
        relevant_sets[qid] = frozenset(rng.choice(pool, size=n_rel, replace=False))
        depth = int(rng.integers(k, pool_size + 1))
        rankings[qid] = list(rng.permutation(pool)[:depth])
    return rankings, relevant_sets


class TestMetricsOracle:
    def test_worked_example(self):
        # 4 relevant, hits at ranks 1 and 3 of the top five
        qrels = Qrels({"q": frozenset({"a", "b", "c", "d"})})
        run = RunRanking({"q": ["a", "x", "b", "y", "z"]}, k=5)
        report = metrics_at_k(run, qrels, k=5)
        assert report.values["precision"] == pytest.approx(0.4)
        assert report.values["recall"] == pytest.approx(0.5)
        assert report.values["mrr"] == pytest.approx(1.0)
        assert report.values["map"] == pytest.approx((1.0 + 2.0 / 3.0) / 4.0, abs=1e-9)
        assert report.values["map"] == pytest.approx(0.4167, abs=1e-4)
        assert report.values["ndcg"] == pytest.approx(1.5 / (1.0 + 1.0 / math.log2(3)), abs=1e-9)
        assert report.values["ndcg"] == pytest.approx(0.9198, abs=1e-4)

    def test_perfect_run_scores_one_everywhere(self):
        qrels = Qrels({"q1": frozenset({"a", "b"}), "q2": frozenset({"c"})})
        run = RunRanking({"q1": ["a", "b", "x", "y", "z"], "q2": ["c", "x", "y", "z", "w"]}, k=5)
        values = metrics_at_k(run, qrels, k=5).values
        assert values["recall"] == 1.0
        assert values["mrr"] == 1.0
        assert values["map"] == 1.0
        assert values["ndcg"] == 1.0

    def test_empty_overlap_scores_zero_everywhere(self):
        qrels = Qrels({"q": frozenset({"a"})})
        run = RunRanking({"q": ["x", "y", "z", "w", "v"]}, k=5)
        values = metrics_at_k(run, qrels, k=5).values
        assert all(v == 0.0 for v in values.values())

    def test_randomized_instances_match_brute_force(self):
        rng = np.random.default_rng(123)
        for _ in range(50):
            rankings, relevant_sets = random_instance(rng)
            report = metrics_at_k(RunRanking(rankings, k=5), Qrels(relevant_sets), k=5)
            expected = brute_metrics(rankings, relevant_sets, k=5)
            for key, value in expected.items():
                assert report.values[key] == pytest.approx(value, abs=1e-9), key

    def test_bounds_and_integrality(self):
        rng = np.random.default_rng(7)
        rankings, relevant_sets = random_instance(rng)
        report = metrics_at_k(RunRanking(rankings, k=5), Qrels(relevant_sets), k=5)
        for value in report.values.values():
            assert 0.0 <= value <= 1.0
        for qid, stats in report.per_query.items():
            assert stats["precision"] * 5 == pytest.approx(round(stats["precision"] * 5))
            n_rel = len(relevant_sets[qid])
            assert stats["recall"] * n_rel == pytest.approx(round(stats["recall"] * n_rel))

    def test_ndcg_one_when_leading_ranks_all_relevant(self):
        qrels = Qrels({"q": frozenset({"a", "b", "c"})})
        run = RunRanking({"q": ["a", "b", "c", "x", "y"]}, k=5)
        assert metrics_at_k(run, qrels, k=5).values["ndcg"] == 1.0

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(5)
        rankings, relevant_sets = random_instance(rng)
        mapping = {f"d{i:02d}": f"D-{i * 7 + 1}" for i in range(12)}
        renamed_rankings = {q: [mapping[c] for c in r] for q, r in rankings.items()}
        renamed_rel = {q: frozenset(mapping[c] for c in rel) for q, rel in relevant_sets.items()}
        base = metrics_at_k(RunRanking(rankings, k=5), Qrels(relevant_sets), k=5)
        renamed = metrics_at_k(RunRanking(renamed_rankings, k=5), Qrels(renamed_rel), k=5)
        assert base.values == renamed.values

    def test_missing_query_named(self):
        qrels = Qrels({"q1": frozenset({"a"}), "q2": frozenset({"b"})})
        run = RunRanking({"q1": ["a"]}, k=5)
        with pytest.raises(EvalError, match="q2"):
            metrics_at_k(run, qrels, k=5)

    def test_macro_f1_switch(self):
        qrels = Qrels({"q1": frozenset({"a"}), "q2": frozenset({"b", "c", "d", "e", "f", "g"})})
        run = RunRanking({"q1": ["a", "x", "y", "z", "w"], "q2": ["b", "c", "x", "y", "z"]}, k=5)
        per_query = metrics_at_k(run, qrels, k=5, macro_f1_mode="per_query_mean")
        from_means = metrics_at_k(run, qrels, k=5, macro_f1_mode="from_mean_pr")
        assert per_query.values["macro_f1"] != from_means.values["macro_f1"]

    def test_map_divisor_switch(self):
        qrels = Qrels({"q": frozenset({"a", "b", "c", "d", "e", "f", "g"})})
        run = RunRanking({"q": ["a", "b", "c", "d", "e"]}, k=5)
        normalized = metrics_at_k(run, qrels, k=5, map_divisor="min_rel_k")
        unnormalized = metrics_at_k(run, qrels, k=5, map_divisor="num_relevant")
        assert normalized.values["map"] == 1.0
        assert unnormalized.values["map"] == pytest.approx(5.0 / 7.0)

    def test_percentage_formatting(self):
        report = MetricReport(k=5, values={k: 0.123456 for k in (
            "precision", "recall", "micro_f1", "macro_f1", "mrr", "map", "ndcg")})
        formatted = format_percentages(report)
        assert formatted["precision"] == 12.3


class TestRunValidation:
    def test_duplicate_candidate_rejected(self):
        with pytest.raises(EvalError, match="duplicate"):
            RunRanking({"q": ["a", "a"]}, k=5).validate()

    def test_query_in_own_ranking_rejected(self):
        with pytest.raises(EvalError, match="own ranking"):
            RunRanking({"q": ["q", "a"]}, k=5).validate()

    def test_qrels_requires_relevant(self):
        with pytest.raises(EvalError, match="no relevant"):
            Qrels({"q": frozenset()})

    def test_qrels_pool_check(self):
        qrels = Qrels({"q": frozenset({"a", "zz"})})
        with pytest.raises(EvalError, match="zz"):
            qrels.validate_pool({"a", "b"})

    def test_qrels_file_roundtrip(self, tmp_path):
        path = tmp_path / "qrels.tsv"
        qrels = Qrels({"q1": frozenset({"a", "b"}), "q2": frozenset({"c"})})
        write_qrels(qrels, path)
        loaded = load_qrels(path)
        assert loaded.relevant == qrels.relevant


class TestTwoStage:
    def test_identity_rerank_preserves_stage1(self):
        stage1 = {"q": ["a", "b", "c", "d"]}
        position_score = {cid: -i for i, cid in enumerate(stage1["q"])}
        run, flags = two_stage(stage1, lambda q, c: position_score[c], k=3)
        assert run.rankings["q"] == ["a", "b", "c"]
        assert flags == []

    def test_n_equals_k_permutes_but_keeps_set(self):
        stage1 = {"q": ["a", "b", "c"]}
        run, _ = two_stage(stage1, lambda q, c: {"a": 0.1, "b": 0.9, "c": 0.5}[c], k=3)
        assert run.rankings["q"] == ["b", "c", "a"]
        assert set(run.rankings["q"]) == set(stage1["q"])

    def test_short_stage1_flagged(self):
        run, flags = two_stage({"q": ["a", "b"]}, lambda q, c: 0.0, k=5)
        assert flags == ["q"]
        assert run.rankings["q"] == ["a", "b"]

    def test_relevant_rescued_from_deep_stage1_rank(self):
        # first stage puts the relevant case at rank 8; the reranker lifts it to 1
        stage1 = {"q": [f"c{i}" for i in range(10)]}
        neural = {f"c{i}": float(-i) for i in range(10)}
        neural["c7"] = 10.0
        run, _ = two_stage(stage1, lambda q, c: neural[c], k=5)
        qrels = Qrels({"q": frozenset({"c7"})})
        assert metrics_at_k(run, qrels, k=5).values["mrr"] == 1.0
        stage1_run = RunRanking({"q": stage1["q"][:5]}, k=5)
        assert metrics_at_k(stage1_run, qrels, k=5).values["mrr"] == 0.0

    def test_tie_break_by_candidate_id(self):
        run, _ = two_stage({"q": ["b", "a", "c"]}, lambda q, c: 1.0, k=3)
        assert run.rankings["q"] == ["a", "b", "c"]
