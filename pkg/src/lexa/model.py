"""Graph layers and optimization for case representations.

The main layer updates node and edge features simultaneously with residual
connections: per-head attention over incoming edges refreshes nodes, and a
per-edge attended scalar (broadcast across feature dimensions) refreshes
edges. Swappable variants cover the ablation grid: an edge-aware attention
layer that leaves edge features fixed, plain attention without edge terms,
and a symmetric-normalized convolution. Readout takes either the global
node's final row or the node average; a case is represented by the
concatenation of its fact and issue graph readouts.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .features import FeaturedCasePair
from .graphs import CaseGraph

GNN_KINDS = ("eugat", "edgegat", "gat", "gcn")
READOUT_KINDS = ("global_node", "average")

CHECKPOINT_MAGIC = b"LEXACKP1"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 1
    dim: int = 64
    hidden_dim: int | None = None
    dropout: float = 0.1
    leaky_slope: float = 0.01
    gnn_kind: str = "eugat"
    readout_kind: str = "global_node"

    def validate(self) -> None:
        if self.layers < 1:
            raise ModelError(f"layers must be >= 1, got {self.layers}")
        if self.heads < 1:
            raise ModelError(f"heads must be >= 1, got {self.heads}")
        if self.dim < 1:
            raise ModelError(f"dim must be >= 1, got {self.dim}")
        if self.hidden_dim is not None and self.hidden_dim != self.dim:
            # residual updates force the hidden width to match the input width
            raise ModelError(f"hidden_dim {self.hidden_dim} must equal dim {self.dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.gnn_kind not in GNN_KINDS:
            raise ModelError(f"gnn_kind '{self.gnn_kind}' not in {GNN_KINDS}")
        if self.readout_kind not in READOUT_KINDS:
            raise ModelError(f"readout_kind '{self.readout_kind}' not in {READOUT_KINDS}")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers, "heads": self.heads, "dim": self.dim,
            "hidden_dim": self.hidden_dim if self.hidden_dim is not None else self.dim,
            "dropout": self.dropout,
            "leaky_slope": self.leaky_slope, "gnn_kind": self.gnn_kind,
            "readout_kind": self.readout_kind,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class LayerParams:
    w_node: list = field(default_factory=list)
    w_edge: list = field(default_factory=list)
    att_node: list = field(default_factory=list)
    att_edge: list = field(default_factory=list)
    weight: ad.Tensor | None = None


@dataclass
class GnnParams:
    kind: str
    layers: int
    heads: int
    dim: int
    tensors: dict[str, ad.Tensor]

    def layer(self, index: int) -> LayerParams:
        lp = LayerParams()
        if self.kind == "gcn":
            lp.weight = self.tensors[f"layer{index}.weight"]
            return lp
        for k in range(self.heads):
            prefix = f"layer{index}.head{k}"
            lp.w_node.append(self.tensors[f"{prefix}.w_node"])
            if self.kind != "gat":
                lp.w_edge.append(self.tensors[f"{prefix}.w_edge"])
            lp.att_node.append(self.tensors[f"{prefix}.att_node"])
            if self.kind == "eugat":
                lp.att_edge.append(self.tensors[f"{prefix}.att_edge"])
        return lp

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def init_params(config: ModelConfig, seed: int) -> GnnParams:
    """Glorot-uniform parameters, deterministic in the seed.

    Matrices use bound sqrt(6 / (fan_in + fan_out)); attention vectors use
    sqrt(6 / (len + 1)).
    """
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.dim
    tensors: dict[str, ad.Tensor] = {}

    def glorot(name: str, shape: tuple) -> None:
        if len(shape) == 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        else:
            bound = np.sqrt(6.0 / (shape[0] + 1))
        tensors[name] = ad.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    for layer in range(config.layers):
        if config.gnn_kind == "gcn":
            glorot(f"layer{layer}.weight", (d, d))
            continue
        for head in range(config.heads):
            prefix = f"layer{layer}.head{head}"
            glorot(f"{prefix}.w_node", (d, d))
            if config.gnn_kind != "gat":
                glorot(f"{prefix}.w_edge", (d, d))
            att_len = 2 * d if config.gnn_kind == "gat" else 3 * d
            glorot(f"{prefix}.att_node", (att_len,))
            if config.gnn_kind == "eugat":
                glorot(f"{prefix}.att_edge", (3 * d,))
    return GnnParams(kind=config.gnn_kind, layers=config.layers, heads=config.heads,
                     dim=d, tensors=tensors)


# ---------------------------------------------------------------------------
# graph incidence constants


class GraphIndex:
    """Constant incidence/permutation tensors for one graph at one width."""

    def __init__(self, graph: CaseGraph, dim: int):
        n, e = graph.num_nodes, graph.num_edges
        src = np.array([graph.node_position(edge.src) for edge in graph.edges], dtype=np.int64)
        dst = np.array([graph.node_position(edge.dst) for edge in graph.edges], dtype=np.int64)
        self.num_nodes = n
        self.num_edges = e
        self.src = src
        self.dst = dst
        if e:
            gather_src = np.zeros((e, n))
            gather_src[np.arange(e), src] = 1.0
            gather_dst = np.zeros((e, n))
            gather_dst[np.arange(e), dst] = 1.0
            perm = np.argsort(dst, kind="stable")
            sort_mat = np.zeros((e, e))
            sort_mat[np.arange(e), perm] = 1.0
            self.gather_src = ad.constant(gather_src)
            self.gather_dst = ad.constant(gather_dst)
            self.scatter_dst = ad.constant(gather_dst.T.copy())
            self.sort_by_dst = ad.constant(sort_mat)
            self.unsort = ad.constant(sort_mat.T.copy())
            self.segments_sorted = dst[perm]
            self.ones_edges = ad.constant(np.ones((e, dim)))
        # symmetric-ish normalization for the convolution baseline:
        # in-degree of the target and out-degree of the source
        if e:
            din = np.bincount(dst, minlength=n).astype(np.float64)
            dout = np.bincount(src, minlength=n).astype(np.float64)
            norm = np.zeros((n, n))
            for u, v in zip(src, dst):
                norm[v, u] += 1.0 / np.sqrt(din[v] * dout[u])
            self.conv_matrix = ad.constant(norm)
        else:
            self.conv_matrix = ad.constant(np.zeros((n, n))) if n else None


def graph_index(graph: CaseGraph, dim: int) -> GraphIndex:
    cache = graph.__dict__.setdefault("_layer_index", {})
    if dim not in cache:
        cache[dim] = GraphIndex(graph, dim)
    return cache[dim]


# ---------------------------------------------------------------------------
# layers


def _dropout(t: ad.Tensor, rate: float, rng) -> ad.Tensor:
    if rate <= 0.0 or t.data.size == 0:
        return t
    if rng is None:
        raise ModelError("dropout requires an rng in training mode")
    mask = (rng.random(t.data.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return ad.hadamard(t, ad.constant(mask))


def _apply_layer(kind, h_v, h_e, graph, lp: LayerParams, config: ModelConfig,
                 train_mode: bool, rng, collect: dict | None = None) -> tuple[ad.Tensor, ad.Tensor]:
    if h_v.data.shape != (graph.num_nodes, config.dim):
        raise ModelError(
            f"node features shape {h_v.data.shape} != ({graph.num_nodes}, {config.dim})")
    if h_e.data.shape != (graph.num_edges, config.dim):
        raise ModelError(
            f"edge features shape {h_e.data.shape} != ({graph.num_edges}, {config.dim})")
    slope = config.leaky_slope
    idx = graph_index(graph, config.dim)

    if graph.num_edges == 0 or graph.num_nodes == 0:
        new_v, new_e = h_v, h_e
    elif kind == "gcn":
        agg = ad.matmul(idx.conv_matrix, h_v)
        new_v = ad.add(h_v, ad.matmul(agg, ad.transpose(lp.weight)))
        new_e = h_e
    else:
        node_aggs = []
        edge_scalars = []
        for k in range(len(lp.w_node)):
            proj_nodes = ad.matmul(h_v, ad.transpose(lp.w_node[k]))
            src_p = ad.matmul(idx.gather_src, proj_nodes)
            dst_p = ad.matmul(idx.gather_dst, proj_nodes)
            if kind == "gat":
                scores_in = ad.concat([dst_p, src_p])
                messages = src_p
            else:
                proj_edges = ad.matmul(h_e, ad.transpose(lp.w_edge[k]))
                scores_in = ad.concat([dst_p, src_p, proj_edges])
                messages = ad.add(src_p, proj_edges)
            raw = ad.leaky_relu(ad.matmul(scores_in, lp.att_node[k]), slope)
            alpha_sorted = ad.segment_softmax(ad.matmul(idx.sort_by_dst, raw),
                                              idx.segments_sorted)
            alpha = ad.matmul(idx.unsort, alpha_sorted)
            if collect is not None:
                collect.setdefault("alpha", []).append(alpha.data.copy())
            node_aggs.append(ad.matmul(idx.scatter_dst, ad.scale_rows(messages, alpha)))
            if kind == "eugat":
                edge_in = ad.concat([dst_p, proj_edges, src_p])
                edge_scalars.append(
                    ad.leaky_relu(ad.matmul(edge_in, lp.att_edge[k]), slope))
        new_v = ad.add(h_v, ad.mean(node_aggs))
        if kind == "eugat":
            broadcast = ad.scale_rows(idx.ones_edges, ad.mean(edge_scalars))
            new_e = ad.add(h_e, broadcast)
        else:
            new_e = h_e

    if train_mode and config.dropout > 0.0:
        new_v = _dropout(new_v, config.dropout, rng)
        if kind == "eugat":
            new_e = _dropout(new_e, config.dropout, rng)
    return new_v, new_e


def eugat_layer(h_v, h_e, graph, layer_params, config, train_mode=False, rng=None,
                collect=None):
    """One node-and-edge updating attention layer (residual on both)."""
    return _apply_layer("eugat", h_v, h_e, graph, layer_params, config, train_mode, rng,
                        collect=collect)


def baseline_layer(kind, h_v, h_e, graph, layer_params, config, train_mode=False, rng=None):
    """Ablation layers: 'edgegat' (edges fixed), 'gat' (no edge terms), 'gcn'."""
    if kind not in ("edgegat", "gat", "gcn"):
        raise ModelError(f"unknown baseline kind '{kind}'")
    return _apply_layer(kind, h_v, h_e, graph, layer_params, config, train_mode, rng)


def readout(h_v: ad.Tensor, graph: CaseGraph, kind: str) -> ad.Tensor:
    """Collapse final node features to one graph-level vector."""
    if kind == "global_node":
        pos = graph.global_position()
        if pos is None:
            raise ModelError(
                "global_node readout on a graph built without a global node; use average")
        return ad.select_row(h_v, pos)
    if kind == "average":
        n = graph.num_nodes
        if n == 0:
            raise ModelError("average readout on an empty graph")
        return ad.select_row(ad.matmul(ad.constant(np.full((1, n), 1.0 / n)), h_v), 0)
    raise ModelError(f"unknown readout kind '{kind}'")


def graph_representation(node_feats, edge_feats, graph, params: GnnParams,
                         config: ModelConfig, train_mode=False, rng=None) -> ad.Tensor:
    h_v = ad.constant(node_feats)
    h_e = ad.constant(edge_feats)
    for layer in range(config.layers):
        h_v, h_e = _apply_layer(config.gnn_kind, h_v, h_e, graph, params.layer(layer),
                                config, train_mode, rng)
    return readout(h_v, graph, config.readout_kind)


def case_representation(pair: FeaturedCasePair, params: GnnParams, config: ModelConfig,
                        train_mode: bool = False, rng=None) -> ad.Tensor:
    """Concatenated fact and issue graph representations of one case."""
    if pair.dim != config.dim:
        raise ModelError(f"feature dim {pair.dim} != model dim {config.dim}")
    fact = graph_representation(pair.fact_node_features, pair.fact_edge_features,
                                pair.fact_graph, params, config, train_mode, rng)
    issue = graph_representation(pair.issue_node_features, pair.issue_edge_features,
                                 pair.issue_graph, params, config, train_mode, rng)
    return ad.concat([fact, issue])


# ---------------------------------------------------------------------------
# optimizer


def init_adam_state(params: GnnParams) -> dict:
    return {
        "t": 0,
        "m": {name: np.zeros_like(t.data) for name, t in params.tensors.items()},
        "v": {name: np.zeros_like(t.data) for name, t in params.tensors.items()},
    }


def adam_step(params: GnnParams, state: dict, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam with decoupled weight decay applied beforehand."""
    beta1, beta2 = betas
    state["t"] += 1
    t = state["t"]
    for name, p in params.tensors.items():
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        grad = p.grad
        if grad is None:
            grad = np.zeros_like(p.data)
        elif not np.all(np.isfinite(grad)):
            raise ModelError(f"non-finite gradient for parameter '{name}'")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: GnnParams, config: ModelConfig, seed: int) -> None:
    """Binary checkpoint: versioned JSON header + raw row-major float64 buffers."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "seed": seed,
        "config": config.to_dict(),
        "kind": params.kind,
        "tensors": [[name, list(t.data.shape)] for name, t in params.tensors.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, t in params.tensors.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[GnnParams, ModelConfig, int]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ModelError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ModelError(f"{path}: unsupported format version {header['format_version']}")
        config = ModelConfig.from_dict(header["config"])
        tensors: dict[str, ad.Tensor] = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ModelError(f"{path}: truncated tensor data for '{name}'")
            data = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
            tensors[name] = ad.Tensor(data, requires_grad=True)
    params = GnnParams(kind=header["kind"], layers=config.layers, heads=config.heads,
                       dim=config.dim, tensors=tensors)
    return params, config, header["seed"]


def checkpoint_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
