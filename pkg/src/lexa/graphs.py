"""Case graph construction from relation triplets.

Each case yields two directed graphs, one for its facts and one for its
issues. Entity surfaces are deduplicated by exact trimmed string; an optional
virtual global node is linked to every entity node in both directions so it
can aggregate for readout and broadcast during message passing. Node and edge
orderings follow first appearance, which keeps serialization and downstream
RNG streams reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

ENTITY = "entity"
GLOBAL = "global"
RELATION = "relation"
GLOBAL_LINK = "global_link"


class GraphBuildError(ValueError):
    """A triplet or document cannot be turned into a valid case graph."""


@dataclass(frozen=True)
class RelationTriplet:
    head: str
    relation: str
    tail: str

    def clause(self) -> str:
        """Single-space reconstruction of the triplet as a clause."""
        return f"{self.head.strip()} {self.relation.strip()} {self.tail.strip()}"


@dataclass
class CaseDocument:
    case_id: str
    fact_text: str
    issue_text: str
    fact_triplets: list[RelationTriplet]
    issue_triplets: list[RelationTriplet]

    def validate(self) -> None:
        if not self.case_id.strip():
            raise GraphBuildError("case document has an empty case_id")
        for role, text, triplets in (
            ("fact", self.fact_text, self.fact_triplets),
            ("issue", self.issue_text, self.issue_triplets),
        ):
            if triplets and not text.strip():
                raise GraphBuildError(
                    f"case {self.case_id}: empty {role} text with {len(triplets)} {role} triplets"
                )


@dataclass(frozen=True)
class GraphNode:
    node_id: int
    surface: str
    kind: str
    first_triplet: int | None = None
    first_role: str | None = None
    context_sentence: str | None = None


@dataclass(frozen=True)
class GraphEdge:
    edge_id: int
    src: int
    dst: int
    kind: str
    relation_surface: str = ""


@dataclass
class CaseGraph:
    nodes: list[GraphNode]
    edges: list[GraphEdge]
    node_id_offset: int = 0
    edge_id_offset: int = 0
    _position: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._position = {n.node_id: i for i, n in enumerate(self.nodes)}

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def node_position(self, node_id: int) -> int:
        return self._position[node_id]

    def entity_nodes(self) -> list[GraphNode]:
        return [n for n in self.nodes if n.kind == ENTITY]

    def global_node(self) -> GraphNode | None:
        for n in self.nodes:
            if n.kind == GLOBAL:
                return n
        return None

    def global_position(self) -> int | None:
        for i, n in enumerate(self.nodes):
            if n.kind == GLOBAL:
                return i
        return None

    def relation_edges(self) -> list[GraphEdge]:
        return [e for e in self.edges if e.kind == RELATION]

    def to_record(self) -> dict:
        return {
            "nodes": [
                [n.node_id, n.surface, n.kind, n.first_triplet, n.first_role, n.context_sentence]
                for n in self.nodes
            ],
            "edges": [
                [e.edge_id, e.src, e.dst, e.kind, e.relation_surface] for e in self.edges
            ],
            "node_id_offset": self.node_id_offset,
            "edge_id_offset": self.edge_id_offset,
        }


def serialize_graph(graph: CaseGraph) -> str:
    """Canonical one-line JSON form; byte-identical for identical inputs."""
    return json.dumps(graph.to_record(), sort_keys=True, separators=(",", ":"))


def build_case_graph(
    triplets: list[RelationTriplet],
    include_global: bool = True,
    node_id_offset: int = 0,
    edge_id_offset: int = 0,
) -> CaseGraph:
    """Build one directed case graph from relation triplets.

    One entity node per distinct trimmed surface, one relation edge per
    triplet (head -> tail), and, when ``include_global`` is set, a global
    node wired to every entity node in both directions.
    """
    nodes: list[GraphNode] = []
    by_surface: dict[str, int] = {}

    def intern(surface: str, triplet_index: int, role: str, sentence: str) -> int:
        if surface in by_surface:
            return by_surface[surface]
        node_id = node_id_offset + len(nodes)
        nodes.append(GraphNode(
            node_id=node_id,
            surface=surface,
            kind=ENTITY,
            first_triplet=triplet_index,
            first_role=role,
            context_sentence=sentence,
        ))
        by_surface[surface] = node_id
        return node_id

    edges: list[GraphEdge] = []
    for i, t in enumerate(triplets):
        head, rel, tail = t.head.strip(), t.relation.strip(), t.tail.strip()
        for name, value in (("head", head), ("relation", rel), ("tail", tail)):
            if not value:
                raise GraphBuildError(f"triplet {i}: empty {name} field")
        sentence = t.clause()
        head_id = intern(head, i, "head", sentence)
        tail_id = intern(tail, i, "tail", sentence)
        edges.append(GraphEdge(
            edge_id=edge_id_offset + len(edges),
            src=head_id,
            dst=tail_id,
            kind=RELATION,
            relation_surface=rel,
        ))

    if include_global:
        global_id = node_id_offset + len(nodes)
        nodes.append(GraphNode(node_id=global_id, surface="", kind=GLOBAL))
        for n in nodes[:-1]:
            edges.append(GraphEdge(
                edge_id=edge_id_offset + len(edges),
                src=global_id,
                dst=n.node_id,
                kind=GLOBAL_LINK,
            ))
            edges.append(GraphEdge(
                edge_id=edge_id_offset + len(edges),
                src=n.node_id,
                dst=global_id,
                kind=GLOBAL_LINK,
            ))

    return CaseGraph(nodes=nodes, edges=edges,
                     node_id_offset=node_id_offset, edge_id_offset=edge_id_offset)


def build_case_pair(doc: CaseDocument, include_global: bool = True) -> tuple[CaseGraph, CaseGraph]:
    """Build the fact and issue graphs of one case with disjoint node/edge ids."""
    doc.validate()
    try:
        fact = build_case_graph(doc.fact_triplets, include_global=include_global)
    except GraphBuildError as err:
        raise GraphBuildError(f"fact graph of case {doc.case_id}: {err}") from err
    try:
        issue = build_case_graph(
            doc.issue_triplets,
            include_global=include_global,
            node_id_offset=fact.num_nodes,
            edge_id_offset=fact.num_edges,
        )
    except GraphBuildError as err:
        raise GraphBuildError(f"issue graph of case {doc.case_id}: {err}") from err
    return fact, issue


def remove_relation_edges(graph: CaseGraph, drop_positions: set[int]) -> CaseGraph:
    """Return a copy of the graph without the relation edges at the given positions.

    Positions index ``graph.edges``; global links must not be named. Node set
    and all ids are preserved.
    """
    for pos in drop_positions:
        if graph.edges[pos].kind != RELATION:
            raise ValueError(f"edge at position {pos} is a {graph.edges[pos].kind}, not droppable")
    kept = [e for i, e in enumerate(graph.edges) if i not in drop_positions]
    return CaseGraph(nodes=list(graph.nodes), edges=kept,
                     node_id_offset=graph.node_id_offset, edge_id_offset=graph.edge_id_offset)


def prune_edges(graph: CaseGraph, keep_ratio: float, rng) -> CaseGraph:
    """Statically retain a fixed fraction of relation edges (seeded, exact count).

    Used for graph sparsification experiments; distinct from training-time
    edge dropping, which is an independent per-edge Bernoulli draw.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    if keep_ratio == 1.0:
        return graph
    rel_positions = [i for i, e in enumerate(graph.edges) if e.kind == RELATION]
    keep_count = int(round(keep_ratio * len(rel_positions)))
    kept = set(rng.choice(len(rel_positions), size=keep_count, replace=False)) if keep_count else set()
    drop = {rel_positions[i] for i in range(len(rel_positions)) if i not in kept}
    return remove_relation_edges(graph, drop)
