"""Retrieval evaluation: seven metrics at a cutoff, plus two-stage reranking.

Binary relevance throughout. Macro-F1 averages per-query F1 scores (the
alternative, F1 of the query-averaged precision and recall, is available as
a switch). Average precision normalizes by min(#relevant, K) so a perfect
top-K run scores 1; the unnormalized divisor is the other switch. NDCG uses
log2 discounting with the ideal ordering of the retrieved top-K items.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

METRIC_KEYS = ("precision", "recall", "micro_f1", "macro_f1", "mrr", "map", "ndcg")


class EvalError(ValueError):
    pass


@dataclass
class Qrels:
    relevant: dict[str, frozenset]

    def __post_init__(self):
        for qid, ids in self.relevant.items():
            if not ids:
                raise EvalError(f"query {qid} has no relevant candidates")

    def validate_pool(self, pool_ids) -> None:
        pool = set(pool_ids)
        for qid, ids in self.relevant.items():
            missing = ids - pool
            if missing:
                raise EvalError(
                    f"query {qid}: relevant ids not in candidate pool: {sorted(missing)[:5]}")


def load_qrels(path) -> Qrels:
    """Read tab-separated (query_id, relevant candidate_id) pairs."""
    relevant: dict[str, set] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise EvalError(f"{path}: line {lineno}: expected 2 tab-separated fields")
            relevant.setdefault(parts[0], set()).add(parts[1])
    if not relevant:
        raise EvalError(f"{path}: no judgments")
    return Qrels({qid: frozenset(ids) for qid, ids in relevant.items()})


def write_qrels(qrels: Qrels, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in qrels.relevant:
            for cid in sorted(qrels.relevant[qid]):
                fh.write(f"{qid}\t{cid}\n")


@dataclass
class RunRanking:
    rankings: dict[str, list[str]]
    k: int

    def validate(self) -> None:
        for qid, ranked in self.rankings.items():
            if len(set(ranked)) != len(ranked):
                raise EvalError(f"query {qid}: duplicate candidate in ranking")
            if qid in ranked:
                raise EvalError(f"query {qid} appears in its own ranking")


@dataclass
class MetricReport:
    k: int
    values: dict[str, float]
    per_query: dict[str, dict] = field(default_factory=dict)


def _dcg(relevances) -> float:
    return sum(rel / math.log2(rank + 2) for rank, rel in enumerate(relevances))


def metrics_at_k(run: RunRanking, qrels: Qrels, k: int = 5,
                 map_divisor: str = "min_rel_k",
                 macro_f1_mode: str = "per_query_mean") -> MetricReport:
    """All seven metrics over a run, values in [0, 1] before formatting."""
    if map_divisor not in ("min_rel_k", "num_relevant"):
        raise EvalError(f"unknown map_divisor '{map_divisor}'")
    if macro_f1_mode not in ("per_query_mean", "from_mean_pr"):
        raise EvalError(f"unknown macro_f1_mode '{macro_f1_mode}'")
    run.validate()
    missing = set(qrels.relevant) - set(run.rankings)
    if missing:
        raise EvalError(f"run is missing queries: {sorted(missing)[:5]}")

    per_query: dict[str, dict] = {}
    pooled_tp = pooled_fp = pooled_fn = 0
    for qid, relevant in qrels.relevant.items():
        top = run.rankings[qid][:k]
        hits = [1 if cid in relevant else 0 for cid in top]
        tp = sum(hits)
        precision = tp / k
        recall = tp / len(relevant)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        pooled_tp += tp
        pooled_fp += k - tp
        pooled_fn += len(relevant) - tp

        mrr = 0.0
        for rank, hit in enumerate(hits, start=1):
            if hit:
                mrr = 1.0 / rank
                break

        hit_precisions = [sum(hits[:rank]) / rank
                          for rank, hit in enumerate(hits, start=1) if hit]
        divisor = min(len(relevant), k) if map_divisor == "min_rel_k" else len(relevant)
        ap = sum(hit_precisions) / divisor if hit_precisions else 0.0

        dcg = _dcg(hits)
        idcg = _dcg(sorted(hits, reverse=True))
        ndcg = dcg / idcg if idcg else 0.0

        per_query[qid] = {
            "tp": tp, "precision": precision, "recall": recall, "f1": f1,
            "mrr": mrr, "ap": ap, "ndcg": ndcg, "num_relevant": len(relevant),
        }

    n = len(qrels.relevant)
    pooled_precision = pooled_tp / (pooled_tp + pooled_fp) if pooled_tp + pooled_fp else 0.0
    pooled_recall = pooled_tp / (pooled_tp + pooled_fn) if pooled_tp + pooled_fn else 0.0
    micro_f1 = (2 * pooled_precision * pooled_recall / (pooled_precision + pooled_recall)
                if pooled_precision + pooled_recall else 0.0)
    mean_precision = sum(q["precision"] for q in per_query.values()) / n
    mean_recall = sum(q["recall"] for q in per_query.values()) / n
    if macro_f1_mode == "per_query_mean":
        macro_f1 = sum(q["f1"] for q in per_query.values()) / n
    else:
        macro_f1 = (2 * mean_precision * mean_recall / (mean_precision + mean_recall)
                    if mean_precision + mean_recall else 0.0)

    values = {
        "precision": mean_precision,
        "recall": mean_recall,
        "micro_f1": micro_f1,
        "macro_f1": macro_f1,
        "mrr": sum(q["mrr"] for q in per_query.values()) / n,
        "map": sum(q["ap"] for q in per_query.values()) / n,
        "ndcg": sum(q["ndcg"] for q in per_query.values()) / n,
    }
    return MetricReport(k=k, values=values, per_query=per_query)


def format_percentages(report: MetricReport) -> dict[str, float]:
    """Metric values as percentages rounded to one decimal, for reports."""
    return {key: round(100.0 * report.values[key], 1) for key in METRIC_KEYS}


def two_stage(stage1: dict[str, list[str]], score_fn, k: int) -> tuple[RunRanking, list[str]]:
    """Rerank each query's first-stage list with ``score_fn(qid, cid)``.

    Sorting is by score descending with candidate id as the tie-break;
    queries whose first-stage list is shorter than ``k`` keep everything and
    are returned as flagged.
    """
    rankings = {}
    short_queries = []
    for qid, candidates in stage1.items():
        if len(candidates) < k:
            short_queries.append(qid)
        reranked = sorted(candidates, key=lambda cid: (-score_fn(qid, cid), cid))
        rankings[qid] = reranked[:k]
    return RunRanking(rankings=rankings, k=k), short_queries
