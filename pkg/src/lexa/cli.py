"""Command-line interface for the retrieval engine."""

from __future__ import annotations

import functools
import json
import sys

import click

from . import features as ft
from . import model as md
from . import pipeline as pl
from .bm25 import build_index
from .graphs import GraphBuildError, build_case_pair, serialize_graph
from .metrics import EvalError, load_qrels, metrics_at_k, format_percentages

_ENGINE_ERRORS = (pl.PipelineError, GraphBuildError, ft.FeatureError, EvalError,
                  md.ModelError, FileNotFoundError, KeyError, ValueError)

READOUT_ALIASES = {"global": "global_node", "avg": "average"}
AUG_ALIASES = {"none": "none", "edge-drop": "edge_drop",
               "mask-node": "feat_mask_node", "mask-edge": "feat_mask_edge"}


def engine_command(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _ENGINE_ERRORS as err:
            raise click.ClickException(str(err)) from err
    return wrapper


def config_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(), default=None,
                     help="Run configuration JSON file."),
        click.option("--seed", type=int, default=None),
        click.option("--gnn", type=click.Choice(["eugat", "edgegat", "gat", "gcn"]), default=None),
        click.option("--readout", type=click.Choice(["global", "avg"]), default=None),
        click.option("--aug", type=click.Choice(list(AUG_ALIASES)), default=None),
        click.option("--epsilon", type=float, default=None),
        click.option("--p-node", type=float, default=None),
        click.option("--p-edge", type=float, default=None),
        click.option("--tau", type=float, default=None),
        click.option("--n-easy", type=int, default=None),
        click.option("--n-hard", type=int, default=None),
        click.option("--template", type=click.Choice(list(ft.TEMPLATE_IDS)), default=None),
        click.option("--edge-keep", type=float, default=None),
        click.option("--no-global", is_flag=True, default=False,
                     help="Build graphs without the virtual global node."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def resolve_config(config_path, seed, gnn, readout, aug, epsilon, p_node, p_edge,
                   tau, n_easy, n_hard, template, edge_keep, no_global) -> pl.RunConfig:
    config = pl.RunConfig.from_file(config_path) if config_path else pl.RunConfig()
    if seed is not None:
        config.seed = seed
    if gnn is not None:
        config.model.gnn_kind = gnn
    if readout is not None:
        config.model.readout_kind = READOUT_ALIASES[readout]
    if aug is not None:
        config.augment.method = AUG_ALIASES[aug]
    if epsilon is not None:
        config.augment.epsilon = epsilon
    if p_node is not None:
        config.augment.p_node = p_node
    if p_edge is not None:
        config.augment.p_edge = p_edge
    if tau is not None:
        config.loss.tau = tau
    if n_easy is not None:
        config.loss.n_easy = n_easy
    if n_hard is not None:
        config.loss.n_hard = n_hard
    if template is not None:
        config.features.template = template
    if edge_keep is not None:
        config.graph.edge_keep = edge_keep
    if no_global:
        config.graph.include_global = False
    config.validate()
    return config


@click.group()
def main():
    """Graph-based legal case retrieval engine."""


@main.command()
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--num-cases", type=int, default=200, show_default=True)
@click.option("--num-queries", type=int, default=50, show_default=True)
@click.option("--num-topics", type=int, default=10, show_default=True)
@click.option("--triplets-per-case", type=int, default=8, show_default=True)
@click.option("--vocab-per-topic", type=int, default=30, show_default=True)
@click.option("--relevant-per-query", type=float, default=4.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@engine_command
def synth(out_dir, num_cases, num_queries, num_topics, triplets_per_case,
          vocab_per_topic, relevant_per_query, seed):
    """Generate a synthetic topic-structured corpus, queries, and judgments."""
    import os

    spec = pl.SyntheticSpec(
        num_cases=num_cases, num_queries=num_queries, num_topics=num_topics,
        triplets_per_case=triplets_per_case, vocab_per_topic=vocab_per_topic,
        relevant_per_query=relevant_per_query, seed=seed)
    candidates, queries, qrels = pl.synth_generate(spec)
    os.makedirs(out_dir, exist_ok=True)
    pl.write_corpus(candidates, os.path.join(out_dir, "corpus.jsonl"))
    pl.write_corpus(queries, os.path.join(out_dir, "queries.jsonl"))
    from .metrics import write_qrels

    write_qrels(qrels, os.path.join(out_dir, "qrels.tsv"))
    mean_rel = sum(len(v) for v in qrels.relevant.values()) / len(qrels.relevant)
    click.echo(f"wrote {len(candidates)} candidates, {len(queries)} queries, "
               f"mean relevant/query {mean_rel:.2f} to {out_dir}")


@main.command("build-graphs")
@click.option("--corpus", "corpus_path", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@config_options
@engine_command
def build_graphs(corpus_path, out_path, **config_kwargs):
    """Construct fact/issue graphs for every case and write them as JSONL."""
    config = resolve_config(**config_kwargs)
    docs = pl.load_corpus(corpus_path)
    nodes = edges = 0
    with open(out_path, "w", encoding="utf-8") as fh:
        for case_id, doc in docs.items():
            fact, issue = build_case_pair(doc, include_global=config.graph.include_global)
            if config.graph.edge_keep < 1.0:
                fact = pl.prune_edges(fact, config.graph.edge_keep,
                                      pl.substream(config.seed, "prune", case_id, "fact"))
                issue = pl.prune_edges(issue, config.graph.edge_keep,
                                       pl.substream(config.seed, "prune", case_id, "issue"))
            record = {"case_id": case_id,
                      "fact": json.loads(serialize_graph(fact)),
                      "issue": json.loads(serialize_graph(issue))}
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
            nodes += fact.num_nodes + issue.num_nodes
            edges += fact.num_edges + issue.num_edges
    click.echo(f"built graphs for {len(docs)} cases ({nodes} nodes, {edges} edges) -> {out_path}")


@main.command("export-prompts")
@click.option("--corpus", "corpus_path", type=click.Path(), required=True)
@click.option("--queries", "queries_path", type=click.Path(), default=None)
@click.option("--out", "out_path", type=click.Path(), required=True)
@config_options
@engine_command
def export_prompts(corpus_path, queries_path, out_path, **config_kwargs):
    """Render and export every encoding request for offline embedding."""
    config = resolve_config(**config_kwargs)
    templates = ft.get_templates(config.features.template)
    docs = pl.load_corpus(corpus_path)
    if queries_path:
        docs.update(pl.load_corpus(queries_path))

    def requests():
        for doc in docs.values():
            fact, issue = build_case_pair(doc, include_global=config.graph.include_global)
            yield ft.build_requests(doc, fact, issue, templates)

    count = ft.export_requests(requests(), out_path)
    click.echo(f"exported {count} unique encoding requests -> {out_path}")


@main.command("import-embeddings")
@click.option("--embeddings", "embeddings_path", type=click.Path(), required=True)
@click.option("--requests", "requests_path", type=click.Path(), default=None,
              help="Check that every exported request key is covered.")
@click.option("--stub-fill", is_flag=True, default=False,
              help="First generate the embeddings file from the requests with the stub encoder.")
@click.option("--dim", type=int, default=64, show_default=True)
@click.option("--stub-seed", type=int, default=13, show_default=True)
@engine_command
def import_embeddings(embeddings_path, requests_path, stub_fill, dim, stub_seed):
    """Validate an embedding file (width, finiteness, duplicates) and coverage."""
    if stub_fill:
        if not requests_path:
            raise click.ClickException("--stub-fill needs --requests")
        requests = ft.load_requests(requests_path)
        ft.write_embeddings(embeddings_path,
                            {r.key: ft.stub_encode(r.prompt, dim, stub_seed) for r in requests})
    vectors, width = ft.load_embeddings(embeddings_path)
    click.echo(f"loaded {len(vectors)} vectors of width {width}")
    if requests_path:
        requests = ft.load_requests(requests_path)
        missing = [r.key for r in requests if r.key not in vectors]
        if missing:
            raise click.ClickException(
                f"{len(missing)} request keys missing from embeddings, e.g. {missing[:10]}")
        click.echo(f"all {len(requests)} request keys covered")


def _load_training_inputs(config):
    for name, path in (("corpus", config.paths.corpus), ("queries", config.paths.queries),
                       ("qrels", config.paths.qrels)):
        if not path:
            raise pl.PipelineError(f"config paths.{name} is required")
    candidates_docs = pl.load_corpus(config.paths.corpus)
    query_docs = pl.load_corpus(config.paths.queries)
    qrels = load_qrels(config.paths.qrels)
    qrels.validate_pool(candidates_docs.keys())
    return candidates_docs, query_docs, qrels


@main.command()
@click.option("--corpus", "corpus_path", type=click.Path(), default=None)
@click.option("--queries", "queries_path", type=click.Path(), default=None)
@click.option("--qrels", "qrels_path", type=click.Path(), default=None)
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), default=None)
@click.option("--trace", "trace_path", type=click.Path(), default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--dim", type=int, default=None)
@config_options
@engine_command
def train(corpus_path, queries_path, qrels_path, checkpoint_path, trace_path,
          epochs, batch_size, lr, dim, **config_kwargs):
    """Contrastively train the graph encoder and write a checkpoint."""
    config = resolve_config(**config_kwargs)
    if corpus_path:
        config.paths.corpus = corpus_path
    if queries_path:
        config.paths.queries = queries_path
    if qrels_path:
        config.paths.qrels = qrels_path
    if checkpoint_path:
        config.paths.checkpoint = checkpoint_path
    if trace_path:
        config.paths.trace = trace_path
    if epochs is not None:
        config.train.epochs = epochs
    if batch_size is not None:
        config.train.batch_size = batch_size
    if lr is not None:
        config.optimizer.lr = lr
    if dim is not None:
        config.model.dim = dim
        config.model.hidden_dim = dim
        config.features.dim = dim
    config.validate()
    if not config.paths.checkpoint:
        raise pl.PipelineError("config paths.checkpoint is required")

    candidate_docs, query_docs, qrels = _load_training_inputs(config)
    provider = pl.build_provider(config)
    candidates = pl.featurize_corpus(candidate_docs, config, provider)
    queries = pl.featurize_corpus(query_docs, config, provider)
    index = build_index({cid: pl.case_text(doc) for cid, doc in candidate_docs.items()})
    query_texts = {qid: pl.case_text(doc) for qid, doc in query_docs.items()}
    result = pl.train_loop(config, candidates, queries, qrels, query_texts, index)
    if config.paths.trace:
        with open(config.paths.trace, "w", encoding="utf-8") as fh:
            json.dump(result.trace, fh, sort_keys=True, indent=1)
            fh.write("\n")
    losses = result.trace["epoch_losses"]
    first = f"{losses[0]:.4f}" if losses else "n/a"
    last = f"{losses[-1]:.4f}" if losses else "n/a"
    click.echo(f"trained {config.train.epochs} epochs "
               f"(loss {first} -> {last}); checkpoint -> {config.paths.checkpoint}")


@main.command()
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.option("--corpus", "corpus_path", type=click.Path(), required=True)
@config_options
@engine_command
def index(checkpoint_path, corpus_path, **config_kwargs):
    """Encode the candidate pool once and cache it next to the checkpoint."""
    config = resolve_config(**config_kwargs)
    params, model_config, _ = md.load_checkpoint(checkpoint_path)
    config.model = model_config
    config.features.dim = model_config.dim
    docs = pl.load_corpus(corpus_path)
    pairs = pl.featurize_corpus(docs, config)
    ids, matrix = pl.encode_pool(params, config, pairs)
    digest = md.checkpoint_digest(checkpoint_path)
    cache = pl.pool_cache_path(checkpoint_path, digest)
    pl.save_pool_cache(cache, digest, ids, matrix)
    click.echo(f"encoded {len(ids)} candidates -> {cache}")


@main.command()
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True)
@click.option("--corpus", "corpus_path", type=click.Path(), required=True)
@click.option("--queries", "queries_path", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--k", type=int, default=5, show_default=True)
@click.option("--two-stage", "two_stage_mode", is_flag=True, default=False)
@click.option("--stage1-k", type=int, default=10, show_default=True)
@config_options
@engine_command
def retrieve(checkpoint_path, corpus_path, queries_path, out_path, k,
             two_stage_mode, stage1_k, **config_kwargs):
    """Rank candidates for every query; optionally BM25-shortlist first."""
    config = resolve_config(**config_kwargs)
    params, model_config, _ = md.load_checkpoint(checkpoint_path)
    config.model = model_config
    config.features.dim = model_config.dim
    candidate_docs = pl.load_corpus(corpus_path)
    query_docs = pl.load_corpus(queries_path)
    provider = pl.build_provider(config)
    candidates = pl.featurize_corpus(candidate_docs, config, provider)
    queries = pl.featurize_corpus(query_docs, config, provider)

    digest = md.checkpoint_digest(checkpoint_path)
    cache = pl.pool_cache_path(checkpoint_path, digest)
    pool = pl.load_pool_cache(cache, digest)
    if pool is None or sorted(pool[0]) != sorted(candidates):
        pool = pl.encode_pool(params, config, candidates)
        pl.save_pool_cache(cache, digest, pool[0], pool[1])

    lexical = build_index({cid: pl.case_text(d) for cid, d in candidate_docs.items()}) \
        if two_stage_mode else None
    query_texts = {qid: pl.case_text(d) for qid, d in query_docs.items()}
    run, scores, flags = pl.retrieve(
        params, config, candidates, queries, k,
        two_stage_mode=two_stage_mode, stage1_k=stage1_k,
        bm25_index=lexical, query_texts=query_texts, pool=pool)
    pl.write_run(out_path, run, scores, flags,
                 mode="two-stage" if two_stage_mode else "one-stage",
                 stage1_k=stage1_k if two_stage_mode else None)
    click.echo(f"retrieved top-{k} for {len(run.rankings)} queries -> {out_path}")


@main.command()
@click.option("--run", "run_path", type=click.Path(), required=True)
@click.option("--qrels", "qrels_path", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--k", type=int, default=5, show_default=True)
@engine_command
def evaluate(run_path, qrels_path, out_path, k):
    """Score a run against judgments with the seven-metric report."""
    run = pl.load_run(run_path)
    qrels = load_qrels(qrels_path)
    report = metrics_at_k(run, qrels, k=k)
    percents = format_percentages(report)
    for key in ("precision", "recall", "micro_f1", "macro_f1", "mrr", "map", "ndcg"):
        click.echo(f"{key:>10}@{k}: {percents[key]:5.1f}")
    if out_path:
        pl.write_report(out_path, report)
        click.echo(f"report -> {out_path}")


if __name__ == "__main__":
    sys.exit(main())
