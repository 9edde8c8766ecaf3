"""Node and edge feature production for case graphs.

Feature vectors come from text encodings of role-specific prompts. The
engine never calls a hosted model: prompts are rendered here and either
exported for offline encoding, resolved from a precomputed embedding file,
or filled by a deterministic hash-based stub encoder. Edges that connect the
global node to an entity node reuse that entity's feature row.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .graphs import ENTITY, GLOBAL, GLOBAL_LINK, RELATION, CaseDocument, CaseGraph

ROLES = ("head", "tail", "relation", "fact_global", "issue_global", "whole_case")
TEMPLATE_IDS = ("none", "p0", "p1", "p2", "p3")


class FeatureError(ValueError):
    """A prompt, embedding file, or feature attachment is invalid."""


@dataclass(frozen=True)
class PromptTemplateSet:
    template_id: str
    head_template: str
    tail_template: str
    relation_template: str
    fact_prefix: str
    issue_prefix: str


_P1_TRIPLET = (
    "You are a legal knowledge extraction system tasked with constructing "
    "knowledge graphs from legal texts. Please identify and encode the following "
    "{role} that captures the meaningful legal relationships in the case: {{span}}"
)
_P1_SECTION = (
    "You are a legal assistant trained to extract and encode structured legal "
    "information from case texts, identify and encode the following legal {kind}: "
)

TEMPLATES: dict[str, PromptTemplateSet] = {
    "none": PromptTemplateSet(
        template_id="none",
        head_template="{span}",
        tail_template="{span}",
        relation_template="{span}",
        fact_prefix="",
        issue_prefix="",
    ),
    "p0": PromptTemplateSet(
        template_id="p0",
        head_template="Given the following sentence, {sentence}, "
                      "the head entity of legal relation triplet is: {span}",
        tail_template="Given the following sentence, {sentence}, "
                      "the tail entity of legal relation triplet is: {span}",
        relation_template="Given the following sentence, {sentence}, "
                          "the relation between two entities of legal relation triplet is: {span}",
        fact_prefix="Legal facts: ",
        issue_prefix="Legal issues: ",
    ),
    "p1": PromptTemplateSet(
        template_id="p1",
        head_template=_P1_TRIPLET.format(role="head entity"),
        tail_template=_P1_TRIPLET.format(role="tail entity"),
        relation_template=_P1_TRIPLET.format(role="relations"),
        fact_prefix=_P1_SECTION.format(kind="fact"),
        issue_prefix=_P1_SECTION.format(kind="issue"),
    ),
    "p2": PromptTemplateSet(
        template_id="p2",
        head_template="Given the following sentence, {sentence}, "
                      "the head entity of legal relation triplet is:",
        tail_template="Given the following sentence, {sentence}, "
                      "the tail entity of legal relation triplet is:",
        relation_template="Given the following sentence, {sentence}, "
                          "the relation between two entities of legal relation triplet is",
        fact_prefix="Legal facts: ",
        issue_prefix="Legal issues: ",
    ),
    "p3": PromptTemplateSet(
        template_id="p3",
        head_template="Instruction: Encode the legal head entity, {span}, "
                      "from the following legal sentence: {sentence}.",
        tail_template="Instruction: Encode the legal tail entity, {span}, "
                      "from the following legal sentence: {sentence}.",
        relation_template="Instruction: Encode the legal relation, {span}, "
                          "from the following legal sentence: {sentence}.",
        fact_prefix="Legal facts: ",
        issue_prefix="Legal issues: ",
    ),
}


def get_templates(template_id: str) -> PromptTemplateSet:
    if template_id not in TEMPLATES:
        raise FeatureError(f"unknown template id '{template_id}'; expected one of {TEMPLATE_IDS}")
    return TEMPLATES[template_id]


def render_prompt(templates: PromptTemplateSet, role: str, sentence: str, span: str) -> str:
    """Render the encoding prompt for one graph element."""
    if role == "head":
        return templates.head_template.format(sentence=sentence, span=span)
    if role == "tail":
        return templates.tail_template.format(sentence=sentence, span=span)
    if role == "relation":
        return templates.relation_template.format(sentence=sentence, span=span)
    if role == "fact_global":
        return templates.fact_prefix + span
    if role == "issue_global":
        return templates.issue_prefix + span
    raise FeatureError(f"unknown prompt role '{role}'; expected one of {ROLES[:-1]}")


WHOLE_CASE_SYSTEM = "The following contains key components of a legal case."


def render_whole_case_prompt(doc: CaseDocument) -> str:
    """Assemble the whole-case encoding prompt (system + user sections)."""
    return (
        "# System Prompt\n"
        f"{WHOLE_CASE_SYSTEM}\n"
        "\n"
        "# User Prompt\n"
        f"Legal facts: {doc.fact_text}.\n"
        f"Legal issues: {doc.issue_text}.\n"
    )


def request_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EmbeddingRequest:
    key: str
    role: str
    prompt: str


def stub_encode(text: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic unit-norm stand-in for a text embedding model.

    Each whitespace token hashes to an (index, sign) pair; the signed counts
    are accumulated and L2-normalized. Empty text (and the measure-zero case
    of exact cancellation) maps to the first basis vector.
    """
    if dim < 2:
        raise FeatureError(f"stub_encode: dim must be >= 2, got {dim}")
    vec = np.zeros(dim, dtype=np.float64)
    for token in text.split():
        digest = hashlib.sha256(f"{seed}:{token}".encode("utf-8")).digest()
        index = int.from_bytes(digest[:8], "big") % dim
        sign = 1.0 if digest[8] % 2 == 0 else -1.0
        vec[index] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec[0] = 1.0
        return vec
    return vec / norm


class StubProvider:
    """Encodes prompts on the fly with the hash stub."""

    def __init__(self, dim: int, seed: int):
        self.dim = dim
        self.seed = seed

    def get(self, key: str, prompt: str) -> np.ndarray:
        return stub_encode(prompt, self.dim, self.seed)


class FileProvider:
    """Serves vectors from a preloaded key -> vector map."""

    def __init__(self, vectors: dict[str, np.ndarray], dim: int):
        self.vectors = vectors
        self.dim = dim
        self.missing: list[str] = []

    def get(self, key: str, prompt: str) -> np.ndarray | None:
        vec = self.vectors.get(key)
        if vec is None:
            self.missing.append(key)
        return vec


def load_embeddings(path) -> tuple[dict[str, np.ndarray], int]:
    """Load a key -> vector map from a JSONL embedding file.

    All vectors must share one width and be finite; duplicate keys are
    collapsed only when their vectors match exactly.
    """
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                key = record["key"]
                vec = np.asarray(record["vector"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise FeatureError(f"{path}: line {lineno}: malformed record ({err})") from err
            if vec.ndim != 1 or vec.size == 0:
                raise FeatureError(f"{path}: line {lineno}: vector must be a non-empty list")
            if not np.all(np.isfinite(vec)):
                raise FeatureError(f"{path}: line {lineno}: non-finite value in vector")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise FeatureError(
                    f"{path}: line {lineno}: vector width {vec.size} != expected {dim}"
                )
            if key in vectors:
                if not np.array_equal(vectors[key], vec):
                    raise FeatureError(f"{path}: duplicate key {key} with conflicting vectors")
                continue
            vectors[key] = vec
    if dim is None:
        raise FeatureError(f"{path}: no records")
    return vectors, dim


def write_embeddings(path, vectors: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, vec in vectors.items():
            fh.write(json.dumps({"key": key, "vector": [float(x) for x in vec]}) + "\n")


def build_requests(
    doc: CaseDocument,
    fact_graph: CaseGraph,
    issue_graph: CaseGraph,
    templates: PromptTemplateSet,
) -> list[EmbeddingRequest]:
    """All encoding requests one case needs, in deterministic order."""
    requests: list[EmbeddingRequest] = []

    def push(role: str, prompt: str):
        requests.append(EmbeddingRequest(key=request_key(prompt), role=role, prompt=prompt))

    push("whole_case", render_whole_case_prompt(doc))
    push("fact_global", render_prompt(templates, "fact_global", "", doc.fact_text))
    push("issue_global", render_prompt(templates, "issue_global", "", doc.issue_text))
    for graph, triplets in ((fact_graph, doc.fact_triplets), (issue_graph, doc.issue_triplets)):
        for node in graph.nodes:
            if node.kind != ENTITY:
                continue
            push(node.first_role,
                 render_prompt(templates, node.first_role, node.context_sentence, node.surface))
        for edge in graph.edges:
            if edge.kind != RELATION:
                continue
            sentence = _edge_sentence(graph, edge)
            push("relation", render_prompt(templates, "relation", sentence, edge.relation_surface))
    return requests


def _edge_sentence(graph: CaseGraph, edge) -> str:
    head = graph.nodes[graph.node_position(edge.src)].surface
    tail = graph.nodes[graph.node_position(edge.dst)].surface
    return f"{head} {edge.relation_surface} {tail}"


@dataclass
class FeaturedCasePair:
    """Fact and issue graphs with dense node and edge feature matrices.

    Matrices are row-aligned with the graphs' node and edge lists.
    """

    case_id: str
    fact_graph: CaseGraph
    issue_graph: CaseGraph
    fact_node_features: np.ndarray
    issue_node_features: np.ndarray
    fact_edge_features: np.ndarray
    issue_edge_features: np.ndarray
    dim: int

    def validate(self) -> None:
        for name, graph, mat in (
            ("fact node", self.fact_graph, self.fact_node_features),
            ("issue node", self.issue_graph, self.issue_node_features),
        ):
            if mat.shape != (graph.num_nodes, self.dim):
                raise FeatureError(f"{name} features shape {mat.shape} != ({graph.num_nodes}, {self.dim})")
        for name, graph, mat in (
            ("fact edge", self.fact_graph, self.fact_edge_features),
            ("issue edge", self.issue_graph, self.issue_edge_features),
        ):
            if mat.shape != (graph.num_edges, self.dim):
                raise FeatureError(f"{name} features shape {mat.shape} != ({graph.num_edges}, {self.dim})")
        for name, mat in (
            ("fact node", self.fact_node_features), ("issue node", self.issue_node_features),
            ("fact edge", self.fact_edge_features), ("issue edge", self.issue_edge_features),
        ):
            if mat.size and not np.all(np.isfinite(mat)):
                raise FeatureError(f"non-finite value in {name} features")
        for graph, nodes, edges in (
            (self.fact_graph, self.fact_node_features, self.fact_edge_features),
            (self.issue_graph, self.issue_node_features, self.issue_edge_features),
        ):
            for pos, edge in enumerate(graph.edges):
                if edge.kind != GLOBAL_LINK:
                    continue
                entity = edge.dst if graph.nodes[graph.node_position(edge.src)].kind == GLOBAL else edge.src
                if not np.array_equal(edges[pos], nodes[graph.node_position(entity)]):
                    raise FeatureError(
                        f"global link edge {edge.edge_id} does not reuse its entity node features"
                    )


def attach_features(
    doc: CaseDocument,
    fact_graph: CaseGraph,
    issue_graph: CaseGraph,
    provider,
    templates: PromptTemplateSet,
) -> FeaturedCasePair:
    """Resolve every node and edge feature row of a case pair.

    Entity nodes get the encoding of their first-occurrence prompt, relation
    edges the encoding of their own relation prompt, global nodes the whole
    fact/issue section encoding, and global links copy the incident entity's
    row. With a file-backed provider, any unresolved keys abort with a list
    of up to ten of them.
    """
    dim = provider.dim

    def resolve(role: str, sentence: str, span: str) -> np.ndarray | None:
        prompt = render_prompt(templates, role, sentence, span)
        return provider.get(request_key(prompt), prompt)

    def features_for(graph: CaseGraph, which: str) -> tuple[np.ndarray, np.ndarray]:
        node_rows = np.zeros((graph.num_nodes, dim), dtype=np.float64)
        for pos, node in enumerate(graph.nodes):
            if node.kind == GLOBAL:
                text = doc.fact_text if which == "fact" else doc.issue_text
                vec = resolve(f"{which}_global", "", text)
            else:
                vec = resolve(node.first_role, node.context_sentence, node.surface)
            if vec is not None:
                node_rows[pos] = vec
        edge_rows = np.zeros((graph.num_edges, dim), dtype=np.float64)
        for pos, edge in enumerate(graph.edges):
            if edge.kind == RELATION:
                vec = resolve("relation", _edge_sentence(graph, edge), edge.relation_surface)
                if vec is not None:
                    edge_rows[pos] = vec
            else:
                src_node = graph.nodes[graph.node_position(edge.src)]
                entity = edge.dst if src_node.kind == GLOBAL else edge.src
                edge_rows[pos] = node_rows[graph.node_position(entity)]
        return node_rows, edge_rows

    fact_nodes, fact_edges = features_for(fact_graph, "fact")
    issue_nodes, issue_edges = features_for(issue_graph, "issue")
    missing = getattr(provider, "missing", [])
    if missing:
        unique = list(dict.fromkeys(missing))
        shown = ", ".join(unique[:10])
        raise FeatureError(
            f"case {doc.case_id}: {len(unique)} embedding keys unresolved: {shown}"
        )
    pair = FeaturedCasePair(
        case_id=doc.case_id,
        fact_graph=fact_graph,
        issue_graph=issue_graph,
        fact_node_features=fact_nodes,
        issue_node_features=issue_nodes,
        fact_edge_features=fact_edges,
        issue_edge_features=issue_edges,
        dim=dim,
    )
    pair.validate()
    return pair


def export_requests(requests_by_case, path) -> int:
    """Write deduplicated encoding requests as JSONL; returns the count.

    Two different prompts hashing to one key abort the export.
    """
    seen: dict[str, str] = {}
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for requests in requests_by_case:
            for req in requests:
                if req.key in seen:
                    if seen[req.key] != req.prompt:
                        raise FeatureError(f"request key collision on {req.key}")
                    continue
                seen[req.key] = req.prompt
                fh.write(json.dumps({"key": req.key, "role": req.role, "prompt": req.prompt}) + "\n")
                count += 1
    return count


def load_requests(path) -> list[EmbeddingRequest]:
    requests = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                requests.append(EmbeddingRequest(
                    key=record["key"], role=record["role"], prompt=record["prompt"]))
            except (json.JSONDecodeError, KeyError) as err:
                raise FeatureError(f"{path}: line {lineno}: malformed request ({err})") from err
    return requests
