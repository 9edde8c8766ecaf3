"""End-to-end engine: configuration, corpus IO, synthetic data, training, retrieval.

Every run is fully determined by (config, seed, corpus): RNG streams are
derived from the seed plus stable string/int tokens, outputs are written with
sorted keys, and checkpoints are byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import bm25
from . import model as md
from .augment import AugmentConfig, apply_augmentation
from .features import (
    FeatureError,
    FeaturedCasePair,
    FileProvider,
    StubProvider,
    attach_features,
    get_templates,
    load_embeddings,
)
from .graphs import CaseDocument, GraphBuildError, RelationTriplet, build_case_pair, prune_edges
from .metrics import Qrels, RunRanking, metrics_at_k, two_stage
from .objective import LossConfig, gcl_loss, mine_hard_negatives

log = logging.getLogger("lexa")

POOL_CACHE_MAGIC = b"LEXAPOOL"


class PipelineError(ValueError):
    pass


def substream(seed: int, *tokens) -> np.random.Generator:
    """Independent, reproducible RNG stream named by (seed, tokens)."""
    entropy = [seed & 0xFFFFFFFF]
    for token in tokens:
        if isinstance(token, (int, np.integer)):
            entropy.append(int(token) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(token).encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:4], "big"))
    return np.random.default_rng(entropy)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def validate(self):
        if self.lr <= 0:
            raise PipelineError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise PipelineError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class TrainSettings:
    batch_size: int = 16
    epochs: int = 100
    val_fraction: float = 0.0

    def validate(self):
        if self.batch_size < 1:
            raise PipelineError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise PipelineError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise PipelineError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclass
class GraphSettings:
    include_global: bool = True
    edge_keep: float = 1.0

    def validate(self):
        if not 0.0 < self.edge_keep <= 1.0:
            raise PipelineError(f"edge_keep must be in (0, 1], got {self.edge_keep}")


@dataclass
class FeatureSettings:
    template: str = "p0"
    dim: int = 64
    provider: str = "stub"
    stub_seed: int = 13

    def validate(self):
        get_templates(self.template)
        if self.dim < 2:
            raise PipelineError(f"feature dim must be >= 2, got {self.dim}")
        if self.provider not in ("stub", "file"):
            raise PipelineError(f"provider '{self.provider}' must be 'stub' or 'file'")


@dataclass
class PathSettings:
    corpus: str | None = None
    queries: str | None = None
    qrels: str | None = None
    embeddings: str | None = None
    checkpoint: str | None = None
    run: str | None = None
    report: str | None = None
    trace: str | None = None


@dataclass
class RunConfig:
    seed: int = 7
    model: md.ModelConfig = field(default_factory=md.ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    graph: GraphSettings = field(default_factory=GraphSettings)
    features: FeatureSettings = field(default_factory=FeatureSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.augment.validate()
        self.optimizer.validate()
        self.train.validate()
        self.graph.validate()
        self.features.validate()
        if self.model.dim != self.features.dim:
            raise PipelineError(
                f"model dim {self.model.dim} != feature dim {self.features.dim}")
        if self.model.readout_kind == "global_node" and not self.graph.include_global:
            raise PipelineError(
                "global_node readout requires include_global; "
                "use average readout for globally-disconnected graphs")
        if self.features.provider == "file" and not self.paths.embeddings:
            raise PipelineError("file feature provider requires paths.embeddings")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["model"] = self.model.to_dict()
        data["optimizer"]["betas"] = list(self.optimizer.betas)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls(
            seed=data.get("seed", 7),
            model=md.ModelConfig(**data.get("model", {})),
            loss=LossConfig(**data.get("loss", {})),
            augment=AugmentConfig(**data.get("augment", {})),
            optimizer=OptimizerConfig(**{
                **data.get("optimizer", {}),
                **({"betas": tuple(data["optimizer"]["betas"])}
                   if "betas" in data.get("optimizer", {}) else {}),
            }),
            train=TrainSettings(**data.get("train", {})),
            graph=GraphSettings(**data.get("graph", {})),
            features=FeatureSettings(**data.get("features", {})),
            paths=PathSettings(**data.get("paths", {})),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as err:
                raise PipelineError(f"{path}: invalid config JSON ({err})") from err
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# corpus files


def load_corpus(path) -> dict[str, CaseDocument]:
    docs: dict[str, CaseDocument] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                doc = CaseDocument(
                    case_id=record["case_id"],
                    fact_text=record["fact_text"],
                    issue_text=record["issue_text"],
                    fact_triplets=[RelationTriplet(*t) for t in record["fact_triplets"]],
                    issue_triplets=[RelationTriplet(*t) for t in record["issue_triplets"]],
                )
            except (json.JSONDecodeError, KeyError, TypeError) as err:
                raise PipelineError(f"{path}: line {lineno}: malformed case record ({err})") from err
            if doc.case_id in docs:
                raise PipelineError(f"{path}: duplicate case_id '{doc.case_id}'")
            doc.validate()
            docs[doc.case_id] = doc
    if not docs:
        raise PipelineError(f"{path}: empty corpus")
    return docs


def write_corpus(docs: dict[str, CaseDocument], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs.values():
            record = {
                "case_id": doc.case_id,
                "fact_text": doc.fact_text,
                "issue_text": doc.issue_text,
                "fact_triplets": [[t.head, t.relation, t.tail] for t in doc.fact_triplets],
                "issue_triplets": [[t.head, t.relation, t.tail] for t in doc.issue_triplets],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def case_text(doc: CaseDocument) -> str:
    """The lexical view of a case: fact text then issue text."""
    return f"{doc.fact_text} {doc.issue_text}".strip()


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpec:
    num_cases: int = 200
    num_queries: int = 50
    num_topics: int = 10
    triplets_per_case: int = 10
    vocab_per_topic: int = 10
    relevant_per_query: float = 4.0
    seed: int = 0
    entity_pool: int = 40
    relation_pool: int = 40
    topic_focus: float = 0.8
    noise_vocab: int = 600
    entity_noise: float = 0.15
    relation_noise: float = 0.05
    secondary_topic_prob: float = 0.3
    borrow_prob: float = 0.45

    def validate(self):
        if self.num_topics < 2:
            raise PipelineError(f"num_topics must be >= 2, got {self.num_topics}")
        if self.relevant_per_query < 1:
            raise PipelineError(f"relevant_per_query must be >= 1, got {self.relevant_per_query}")
        if self.num_cases < self.num_topics:
            raise PipelineError("need at least one candidate per topic")
        if self.relevant_per_query > self.num_cases / self.num_topics:
            raise PipelineError(
                f"relevance target {self.relevant_per_query} infeasible: expected topic pool "
                f"holds ~{self.num_cases / self.num_topics:.1f} candidates")
        if not 0.0 <= self.borrow_prob <= 1.0:
            raise PipelineError(f"borrow_prob must be in [0, 1], got {self.borrow_prob}")


def synth_generate(spec: SyntheticSpec) -> tuple[dict, dict, Qrels]:
    """Topic-structured synthetic corpus: (candidates, queries, qrels).

    Entity and relation tokens come from shared pools; each topic prefers its
    own subset, so topic identity lives in token frequency mixes that inverse
    document frequency cannot see, while rare per-case noise tokens hand
    lexical scoring spurious exact matches. Each query is relevant to a
    subsampled set of same-topic candidates and borrows a fraction of its
    triplets from them (noise slots resampled), so relevance is marked by
    shared relational structure rather than rare terms.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    entity_subsets = [rng.choice(spec.entity_pool, size=min(spec.vocab_per_topic, spec.entity_pool),
                                 replace=False) for _ in range(spec.num_topics)]
    relation_subsets = [rng.choice(spec.relation_pool,
                                   size=min(spec.vocab_per_topic, spec.relation_pool),
                                   replace=False) for _ in range(spec.num_topics)]

    def topic_entity(topic):
        if rng.random() < spec.topic_focus:
            return f"e{entity_subsets[topic][rng.integers(len(entity_subsets[topic]))]}"
        return f"e{rng.integers(spec.entity_pool)}"

    def topic_relation(topic):
        if rng.random() < spec.topic_focus:
            return f"r{relation_subsets[topic][rng.integers(len(relation_subsets[topic]))]}"
        return f"r{rng.integers(spec.relation_pool)}"

    def noise_entity():
        return f"xe{rng.integers(spec.noise_vocab)}"

    def noise_relation():
        return f"xr{rng.integers(spec.noise_vocab)}"

    def fresh_triplet(primary, secondary):
        topic = primary
        if secondary is not None and rng.random() < 0.35:
            topic = secondary
        head = noise_entity() if rng.random() < spec.entity_noise else topic_entity(topic)
        tail = noise_entity() if rng.random() < spec.entity_noise else topic_entity(topic)
        rel = noise_relation() if rng.random() < spec.relation_noise else topic_relation(topic)
        return RelationTriplet(head, rel, tail)

    def pick_secondary(primary):
        if rng.random() < spec.secondary_topic_prob:
            others = [t for t in range(spec.num_topics) if t != primary]
            return int(rng.choice(others))
        return None

    def assemble(case_id, fact, issue):
        return CaseDocument(
            case_id=case_id,
            fact_text=". ".join(t.clause() for t in fact) + ".",
            issue_text=". ".join(t.clause() for t in issue) + ".",
            fact_triplets=fact,
            issue_triplets=issue,
        )

    issue_count = max(2, spec.triplets_per_case // 2)

    candidates: dict[str, CaseDocument] = {}
    by_topic: dict[int, list[str]] = {}
    for i in range(spec.num_cases):
        cid = f"c{i:04d}"
        primary = i % spec.num_topics
        secondary = pick_secondary(primary)
        fact = [fresh_triplet(primary, secondary) for _ in range(spec.triplets_per_case)]
        issue = [fresh_triplet(primary, secondary) for _ in range(issue_count)]
        candidates[cid] = assemble(cid, fact, issue)
        by_topic.setdefault(primary, []).append(cid)

    queries: dict[str, CaseDocument] = {}
    relevant: dict[str, frozenset] = {}
    for i in range(spec.num_queries):
        qid = f"q{i:04d}"
        primary = i % spec.num_topics
        pool = by_topic[primary]
        size = int(min(len(pool), max(1, rng.poisson(spec.relevant_per_query))))
        rel_ids = [str(c) for c in rng.choice(pool, size=size, replace=False)]
        relevant[qid] = frozenset(rel_ids)
        secondary = pick_secondary(primary)

        def renoise(token, make_noise):
            # borrowed structure keeps topical tokens; incidental noise tokens
            # are resampled so relevance never reduces to rare-term matching
            return make_noise() if token.startswith("x") else token

        def query_triplets(count, section):
            triplets = []
            for _ in range(count):
                if rng.random() < spec.borrow_prob:
                    source = candidates[str(rng.choice(rel_ids))]
                    bank = source.fact_triplets if section == "fact" else source.issue_triplets
                    t = bank[rng.integers(len(bank))]
                    triplets.append(RelationTriplet(
                        renoise(t.head, noise_entity),
                        renoise(t.relation, noise_relation),
                        renoise(t.tail, noise_entity),
                    ))
                else:
                    triplets.append(fresh_triplet(primary, secondary))
            return triplets

        fact = query_triplets(spec.triplets_per_case, "fact")
        issue = query_triplets(issue_count, "issue")
        queries[qid] = assemble(qid, fact, issue)
    return candidates, queries, Qrels(relevant)


# ---------------------------------------------------------------------------
# featurization


def build_provider(config: RunConfig):
    if config.features.provider == "stub":
        return StubProvider(config.features.dim, config.features.stub_seed)
    vectors, dim = load_embeddings(config.paths.embeddings)
    if dim != config.features.dim:
        raise PipelineError(
            f"embedding file width {dim} != configured feature dim {config.features.dim}")
    return FileProvider(vectors, dim)


def featurize_corpus(docs: dict[str, CaseDocument], config: RunConfig,
                     provider=None) -> dict[str, FeaturedCasePair]:
    """Graphs plus feature matrices for every case, in corpus order."""
    if provider is None:
        provider = build_provider(config)
    templates = get_templates(config.features.template)
    pairs: dict[str, FeaturedCasePair] = {}
    for case_id, doc in docs.items():
        fact, issue = build_case_pair(doc, include_global=config.graph.include_global)
        if config.graph.edge_keep < 1.0:
            fact = prune_edges(fact, config.graph.edge_keep,
                               substream(config.seed, "prune", case_id, "fact"))
            issue = prune_edges(issue, config.graph.edge_keep,
                                substream(config.seed, "prune", case_id, "issue"))
        pairs[case_id] = attach_features(doc, fact, issue, provider, templates)
    return pairs


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: md.GnnParams
    trace: dict


def _representation(pair, params, config: RunConfig, train_mode, rng):
    return md.case_representation(pair, params, config.model, train_mode=train_mode, rng=rng)


def train_loop(config: RunConfig, candidates: dict[str, FeaturedCasePair],
               queries: dict[str, FeaturedCasePair], qrels: Qrels,
               query_texts: dict[str, str], bm25_index) -> TrainResult:
    """Seeded contrastive training over the query set.

    Per epoch the queries are shuffled and processed in batches; each query
    contributes one positive, sampled easy negatives plus in-batch ones,
    BM25-mined hard negatives, and augmented views according to the loss
    config. One optimizer step per batch on the mean loss.
    """
    config.validate()
    params = md.init_params(config.model, config.seed)
    state = md.init_adam_state(params)
    loss_cfg = config.loss
    candidate_ids = sorted(candidates)

    train_qids = [qid for qid in sorted(queries) if qid in qrels.relevant]
    missing = sorted(set(queries) - set(train_qids))
    if missing:
        log.warning("queries without judgments are excluded from training: %s", missing[:5])
    val_qids: list[str] = []
    if config.train.val_fraction > 0 and len(train_qids) >= 2:
        count = max(1, int(round(config.train.val_fraction * len(train_qids))))
        picked = substream(config.seed, "val").choice(train_qids, size=count, replace=False)
        val_qids = sorted(str(q) for q in picked)
        train_qids = [q for q in train_qids if q not in set(val_qids)]

    hard_ids: dict[str, list[str]] = {}
    for qid in train_qids:
        mined = mine_hard_negatives(qid, query_texts[qid], qrels.relevant[qid],
                                    bm25_index, loss_cfg.n_hard)
        if mined.exhausted:
            log.warning("query %s: only %d hard negatives available of %d requested",
                        qid, len(mined.ids), mined.requested)
        hard_ids[qid] = mined.ids

    epoch_losses: list[float] = []
    effective_easy: list[float] = []
    val_scores: list[float] = []
    best_val = -1.0
    skipped = 0

    for epoch in range(config.train.epochs):
        order = [str(q) for q in substream(config.seed, "shuffle", epoch).permutation(train_qids)]
        batch_size = config.train.batch_size
        losses: list[float] = []
        easy_counts: list[int] = []
        for step in range(0, len(order), batch_size):
            batch = order[step:step + batch_size]
            drop_rng = substream(config.seed, "dropout", epoch, step)

            samples = {}
            for qid in batch:
                sample_rng = substream(config.seed, "sample", epoch, qid)
                relevant = sorted(qrels.relevant[qid])
                positive = str(sample_rng.choice(relevant))
                easy_pool = [c for c in candidate_ids
                             if c not in qrels.relevant[qid] and c != qid]
                take = min(loss_cfg.n_easy, len(easy_pool))
                easies = [str(c) for c in sample_rng.choice(easy_pool, size=take, replace=False)] \
                    if take else []
                samples[qid] = (positive, easies)

            def encode(pair):
                return _representation(pair, params, config, True, drop_rng)

            def augmented(case_id, *tokens):
                rng = substream(config.seed, "augment", epoch, *tokens)
                return apply_augmentation(candidates[case_id], config.augment, rng)

            reps: dict[tuple, ad.Tensor] = {}
            for qid in batch:
                positive, easies = samples[qid]
                reps[("query", qid)] = encode(queries[qid])
                reps[("case", qid, positive)] = encode(candidates[positive])
                if loss_cfg.aug_mode == "aug_pos" or (
                        loss_cfg.aug_mode == "aug_easy_neg" and loss_cfg.use_in_batch_negatives):
                    reps[("aug", qid, positive)] = encode(augmented(positive, qid))
                for i, easy in enumerate(easies):
                    reps[("case", qid, easy)] = encode(candidates[easy])
                    if loss_cfg.aug_mode == "aug_easy_neg":
                        reps[("aug", qid, easy)] = encode(augmented(easy, qid, i))
                for hard in hard_ids[qid]:
                    reps[("case", qid, hard)] = encode(candidates[hard])

            batch_losses = []
            for qid in batch:
                positive, easies = samples[qid]
                easy_reps = [reps[("case", qid, c)] for c in easies]
                aug_easy_reps = [reps[("aug", qid, c)] for c in easies] \
                    if loss_cfg.aug_mode == "aug_easy_neg" else []
                if loss_cfg.use_in_batch_negatives:
                    for other in batch:
                        if other == qid:
                            continue
                        other_pos = samples[other][0]
                        if other_pos in qrels.relevant[qid] or other_pos == positive:
                            continue
                        easy_reps.append(reps[("case", other, other_pos)])
                        if loss_cfg.aug_mode == "aug_easy_neg":
                            aug_easy_reps.append(reps[("aug", other, other_pos)])
                hard_reps = [reps[("case", qid, c)] for c in hard_ids[qid]]
                if not easy_reps and not hard_reps:
                    skipped += 1
                    log.warning("query %s skipped: no available negatives", qid)
                    continue
                query_cfg = loss_cfg
                if loss_cfg.aug_mode == "aug_easy_neg" and not aug_easy_reps:
                    query_cfg = LossConfig(**{**asdict(loss_cfg), "aug_mode": "none"})
                easy_counts.append(len(easy_reps))
                batch_losses.append(gcl_loss(
                    reps[("query", qid)],
                    reps[("case", qid, positive)],
                    h_aug_pos=reps.get(("aug", qid, positive))
                    if loss_cfg.aug_mode == "aug_pos" else None,
                    h_easy=easy_reps,
                    h_aug_easy=aug_easy_reps,
                    h_hard=hard_reps,
                    config=query_cfg,
                ))
            if not batch_losses:
                continue
            total = batch_losses[0]
            for extra in batch_losses[1:]:
                total = ad.add(total, extra)
            mean_loss = ad.scale(total, 1.0 / len(batch_losses))
            mean_loss.backward()
            md.adam_step(params, state, lr=config.optimizer.lr,
                         betas=config.optimizer.betas, eps=config.optimizer.eps,
                         weight_decay=config.optimizer.weight_decay)
            params.zero_grads()
            losses.extend(l.item() for l in batch_losses)

        epoch_losses.append(float(np.mean(losses)) if losses else 0.0)
        effective_easy.append(float(np.mean(easy_counts)) if easy_counts else 0.0)

        if config.paths.checkpoint:
            md.save_checkpoint(config.paths.checkpoint, params, config.model, config.seed)
        if val_qids:
            run, _, _ = retrieve(params, config, candidates,
                                 {q: queries[q] for q in val_qids}, k=5)
            ndcg = metrics_at_k(run, Qrels({q: qrels.relevant[q] for q in val_qids}),
                                k=5).values["ndcg"]
            val_scores.append(ndcg)
            if config.paths.checkpoint and ndcg > best_val:
                best_val = ndcg
                md.save_checkpoint(config.paths.checkpoint + ".best", params,
                                   config.model, config.seed)

    if config.paths.checkpoint:
        md.save_checkpoint(config.paths.checkpoint, params, config.model, config.seed)
    trace = {
        "epoch_losses": epoch_losses,
        "effective_easy_mean": effective_easy,
        "configured_n_easy": loss_cfg.n_easy,
        "skipped_queries": skipped,
    }
    if val_qids:
        trace["val_ndcg"] = val_scores
        trace["val_queries"] = val_qids
    return TrainResult(params=params, trace=trace)


# ---------------------------------------------------------------------------
# retrieval


def _worker_count() -> int:
    env = os.environ.get("LEXA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as err:
            raise PipelineError(f"LEXA_THREADS must be an integer, got '{env}'") from err
    return os.cpu_count() or 1


def encode_pool(params: md.GnnParams, config: RunConfig,
                pairs: dict[str, FeaturedCasePair]) -> tuple[list[str], np.ndarray]:
    """Forward-encode cases (no dropout) into a sorted id list and matrix."""
    ids = sorted(pairs)
    workers = _worker_count()

    def encode_one(case_id):
        with ad.no_grad():
            return _representation(pairs[case_id], params, config, False, None).data

    if workers == 1 or len(ids) < 4:
        rows = [encode_one(cid) for cid in ids]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(encode_one, ids))
    return ids, np.stack(rows) if rows else np.zeros((0, 2 * config.model.dim))


def _safe_unit_rows(matrix: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0):
        raise PipelineError(f"zero-norm {what} representation; cosine ranking undefined")
    return matrix / norms[:, None]


def retrieve(params: md.GnnParams, config: RunConfig,
             candidates: dict[str, FeaturedCasePair],
             queries: dict[str, FeaturedCasePair], k: int,
             two_stage_mode: bool = False, stage1_k: int = 10,
             bm25_index=None, query_texts: dict[str, str] | None = None,
             pool: tuple[list[str], np.ndarray] | None = None,
             ) -> tuple[RunRanking, dict[str, list[float]], list[str]]:
    """Rank candidates for every query by cosine over case representations.

    Two-stage mode restricts each query's pool to its BM25 top ``stage1_k``
    before the neural rerank. Returns the ranking, per-query scores, and ids
    of queries whose first stage came up short.
    """
    if k < 1:
        raise PipelineError(f"k must be >= 1, got {k}")
    first = next(iter(candidates.values()))
    if first.dim != config.model.dim:
        raise PipelineError(f"feature dim {first.dim} != checkpoint dim {config.model.dim}")
    cand_ids, cand_matrix = pool if pool is not None else encode_pool(params, config, candidates)
    cand_unit = _safe_unit_rows(cand_matrix, "candidate")
    row_of = {cid: i for i, cid in enumerate(cand_ids)}

    query_ids, query_matrix = encode_pool(params, config, queries)
    query_unit = _safe_unit_rows(query_matrix, "query")

    rankings: dict[str, list[str]] = {}
    scores: dict[str, list[float]] = {}
    flags: list[str] = []
    if two_stage_mode:
        if bm25_index is None or query_texts is None:
            raise PipelineError("two-stage retrieval needs a lexical index and query texts")
        stage1 = {qid: bm25.top_k(bm25_index, query_texts[qid], stage1_k, exclude={qid})
                  for qid in query_ids}
        sims = {qid: query_unit[i] @ cand_unit.T for i, qid in enumerate(query_ids)}
        run, flags = two_stage(stage1, lambda q, c: sims[q][row_of[c]], k)
        rankings = run.rankings
        scores = {qid: [float(sims[qid][row_of[c]]) for c in ranked]
                  for qid, ranked in rankings.items()}
    else:
        for i, qid in enumerate(query_ids):
            sim = query_unit[i] @ cand_unit.T
            order = sorted(range(len(cand_ids)), key=lambda j: (-sim[j], cand_ids[j]))
            top = [j for j in order if cand_ids[j] != qid][:k]
            rankings[qid] = [cand_ids[j] for j in top]
            scores[qid] = [float(sim[j]) for j in top]
    run = RunRanking(rankings=rankings, k=k)
    run.validate()
    return run, scores, flags


# ---------------------------------------------------------------------------
# candidate-pool cache


def save_pool_cache(path, checkpoint_digest: str, ids: list[str], matrix: np.ndarray) -> None:
    header = {"checkpoint": checkpoint_digest, "ids": ids,
              "dim": int(matrix.shape[1]) if matrix.size else 0}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(POOL_CACHE_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes())


def load_pool_cache(path, checkpoint_digest: str) -> tuple[list[str], np.ndarray] | None:
    """Cached encodings, or None when absent or built from another checkpoint."""
    if not os.path.exists(path):
        return None
    with open(path, "rb") as fh:
        if fh.read(len(POOL_CACHE_MAGIC)) != POOL_CACHE_MAGIC:
            return None
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["checkpoint"] != checkpoint_digest:
            return None
        ids = header["ids"]
        matrix = np.frombuffer(fh.read(), dtype="<f8").reshape(len(ids), header["dim"]).copy()
    return ids, matrix


def pool_cache_path(checkpoint_path: str, digest: str) -> str:
    return f"{checkpoint_path}.pool-{digest[:12]}"


# ---------------------------------------------------------------------------
# reports


def write_run(path, run: RunRanking, scores: dict, flags: list[str], mode: str,
              stage1_k: int | None = None) -> None:
    payload = {
        "k": run.k,
        "mode": mode,
        "stage1_k": stage1_k,
        "rankings": run.rankings,
        "scores": scores,
        "short_stage1_queries": flags,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_run(path) -> RunRanking:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    run = RunRanking(rankings=payload["rankings"], k=payload["k"])
    run.validate()
    return run


def write_report(path, report, per_query: bool = True) -> None:
    from .metrics import format_percentages

    payload = {
        "k": report.k,
        "metrics_percent": format_percentages(report),
        "metrics_raw": report.values,
    }
    if per_query:
        payload["per_query"] = report.per_query
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
