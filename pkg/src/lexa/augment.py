"""Graph augmentation for contrastive training.

Exactly one method per augmented view: relation-edge dropping (a Bernoulli
mask on the adjacency; links to the global node are protected so readout
connectivity survives) or column-wise feature masking of the node or edge
matrices. Augmentation never changes the node set, and identical RNG streams
reproduce identical views.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .features import FeaturedCasePair
from .graphs import RELATION, CaseGraph, remove_relation_edges

METHODS = ("none", "edge_drop", "feat_mask_node", "feat_mask_edge")


class AugmentError(ValueError):
    pass


@dataclass
class AugmentConfig:
    method: str = "none"
    epsilon: float = 0.1
    p_node: float = 0.1
    p_edge: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.method not in METHODS:
            raise AugmentError(f"method '{self.method}' not in {METHODS}; one method per view")
        for name, p in (("epsilon", self.epsilon), ("p_node", self.p_node), ("p_edge", self.p_edge)):
            if not 0.0 <= p <= 1.0:
                raise AugmentError(f"{name} must be in [0, 1], got {p}")


def _drop_graph_edges(graph: CaseGraph, features: np.ndarray, epsilon: float, rng):
    keep_rows = []
    drop_positions = set()
    for pos, edge in enumerate(graph.edges):
        if edge.kind == RELATION and rng.random() < epsilon:
            drop_positions.add(pos)
        else:
            keep_rows.append(pos)
    if not drop_positions:
        return graph, features
    new_graph = remove_relation_edges(graph, drop_positions)
    return new_graph, features[keep_rows]


def edge_drop(pair: FeaturedCasePair, epsilon: float, rng) -> FeaturedCasePair:
    """Drop each relation edge independently with probability ``epsilon``.

    Global links are never dropped; the node set and node features are
    untouched. Feature rows of removed edges are removed with them.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise AugmentError(f"epsilon must be in [0, 1], got {epsilon}")
    fact_graph, fact_edges = _drop_graph_edges(pair.fact_graph, pair.fact_edge_features,
                                               epsilon, rng)
    issue_graph, issue_edges = _drop_graph_edges(pair.issue_graph, pair.issue_edge_features,
                                                 epsilon, rng)
    return replace(pair, fact_graph=fact_graph, issue_graph=issue_graph,
                   fact_edge_features=fact_edges, issue_edge_features=issue_edges)


def feature_mask(pair: FeaturedCasePair, target: str, p: float, rng) -> FeaturedCasePair:
    """Zero a random subset of feature columns across all rows of one matrix kind.

    One column mask is drawn per graph (fact and issue independently);
    topology is untouched.
    """
    if target not in ("node", "edge"):
        raise AugmentError(f"target must be 'node' or 'edge', got '{target}'")
    if not 0.0 <= p <= 1.0:
        raise AugmentError(f"p must be in [0, 1], got {p}")

    def masked(mat: np.ndarray) -> np.ndarray:
        mask = rng.random(pair.dim) < p
        if not mask.any():
            return mat
        out = mat.copy()
        out[:, mask] = 0.0
        return out

    if target == "node":
        return replace(pair, fact_node_features=masked(pair.fact_node_features),
                       issue_node_features=masked(pair.issue_node_features))
    return replace(pair, fact_edge_features=masked(pair.fact_edge_features),
                   issue_edge_features=masked(pair.issue_edge_features))


def apply_augmentation(pair: FeaturedCasePair, config: AugmentConfig, rng) -> FeaturedCasePair:
    config.validate()
    if config.method == "none":
        return pair
    if config.method == "edge_drop":
        return edge_drop(pair, config.epsilon, rng)
    if config.method == "feat_mask_node":
        return feature_mask(pair, "node", config.p_node, rng)
    return feature_mask(pair, "edge", config.p_edge, rng)
