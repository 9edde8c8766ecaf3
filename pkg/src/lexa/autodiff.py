"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The operation inventory is exactly what the graph attention layers and the
contrastive loss need: no broadcasting beyond scalar-times-array, no views,
no double backward. Every forward checks its output for non-finite values
and fails loudly with the operation name.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field

import numpy as np

# context-local so forward-only workers never disable recording for other threads
_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)


class no_grad:
    """Context manager that disables graph recording (forward-only passes)."""

    def __enter__(self):
        self._token = _GRAD_ENABLED.set(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.reset(self._token)
        return False


class Tensor:
    """Dense float64 array participating in a compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _finite(arr):
            raise ValueError("tensor: non-finite input values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item: tensor has {self.data.size} elements")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        """Accumulate gradients of this scalar into every requires_grad leaf.

        A graph may be walked once; a second call on the same root raises.
        """
        if self.data.size != 1:
            raise ValueError(f"backward: root must be scalar, got shape {self.data.shape}")
        if self._consumed:
            raise RuntimeError("backward: graph already walked; rebuild it before calling again")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            node._backward_fn(node.grad)
            node._consumed = True
        self._consumed = True
        for node in order:
            if node.requires_grad and node._backward_fn is None and node.grad is not None \
                    and not np.all(np.isfinite(node.grad)):
                raise ValueError(f"backward: non-finite gradient at leaf '{node._op}'")


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad and t._backward_fn is None:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _finite(arr: np.ndarray) -> bool:
    # the sum is non-finite iff any entry is (legitimate values never overflow it)
    with np.errstate(over="ignore", invalid="ignore"):
        return bool(np.isfinite(np.sum(arr)))


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    arr = np.asarray(data, dtype=np.float64)
    if not _finite(arr):
        raise ValueError(f"{op}: produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out._consumed = False
    if _GRAD_ENABLED.get() and any(p.requires_grad or p._backward_fn is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
        out._op = op
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
        out._op = op
    return out


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D @ 2-D -> 2-D, or 2-D @ 1-D -> 1-D."""
    if a.data.ndim != 2 or b.data.ndim not in (1, 2):
        raise ValueError(f"matmul: unsupported ranks {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if b.data.ndim == 2:
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)
        else:
            _accum(a, np.outer(g, b.data))
            _accum(b, a.data.T @ g)

    return _make(out_data, "matmul", (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, "add", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply every entry by the python scalar ``c``."""
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _make(a.data * c, "scale", (a,), backward)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"hadamard: shape mismatch {a.data.shape} vs {b.data.shape}")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, "hadamard", (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected 2-D, got shape {a.data.shape}")

    def backward(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), "transpose", (a,), backward)


def concat(tensors) -> Tensor:
    """Concatenate along the last axis: 1-D vectors end to end, or 2-D blocks column-wise."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty input list")
    ndim = tensors[0].data.ndim
    if any(t.data.ndim != ndim for t in tensors):
        raise ValueError("concat: mixed ranks")
    if ndim == 1:
        axis = 0
    elif ndim == 2:
        axis = 1
        rows = tensors[0].data.shape[0]
        if any(t.data.shape[0] != rows for t in tensors):
            raise ValueError("concat: row-count mismatch")
    else:
        raise ValueError(f"concat: unsupported rank {ndim}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    widths = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[..., lo:hi])

    return _make(out_data, "concat", tuple(tensors), backward)


def select_row(a: Tensor, i: int) -> Tensor:
    """Extract row ``i`` of a 2-D tensor as a 1-D vector."""
    if a.data.ndim != 2:
        raise ValueError(f"select_row: expected 2-D, got shape {a.data.shape}")
    if not 0 <= i < a.data.shape[0]:
        raise ValueError(f"select_row: row {i} out of range for shape {a.data.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[i] = g
        _accum(a, full)

    return _make(a.data[i].copy(), "select_row", (a,), backward)


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Scale each row of a 2-D tensor by the matching entry of a 1-D tensor."""
    if a.data.ndim != 2 or s.data.ndim != 1 or a.data.shape[0] != s.data.shape[0]:
        raise ValueError(f"scale_rows: shape mismatch {a.data.shape} vs {s.data.shape}")

    def backward(g):
        _accum(a, g * s.data[:, None])
        _accum(s, np.sum(g * a.data, axis=1))

    return _make(a.data * s.data[:, None], "scale_rows", (a, s), backward)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    slope = float(slope)
    pos = a.data >= 0.0
    out_data = np.where(pos, a.data, slope * a.data)

    def backward(g):
        _accum(a, g * np.where(pos, 1.0, slope))

    return _make(out_data, "leaky_relu", (a,), backward)


def segment_softmax(scores: Tensor, segment_ids: np.ndarray) -> Tensor:
    """Softmax within each contiguous segment of a 1-D score vector.

    ``segment_ids`` must be sorted ascending and parallel to ``scores``.
    """
    ids = np.asarray(segment_ids)
    if scores.data.ndim != 1:
        raise ValueError(f"segment_softmax: scores must be 1-D, got shape {scores.data.shape}")
    if scores.data.size == 0:
        raise ValueError("segment_softmax: empty segment")
    if ids.shape != scores.data.shape:
        raise ValueError(f"segment_softmax: ids shape {ids.shape} vs scores {scores.data.shape}")
    if np.any(np.diff(ids) < 0):
        raise ValueError("segment_softmax: segment_ids must be sorted")
    starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
    seg_index = np.cumsum(np.r_[False, ids[1:] != ids[:-1]])
    lengths = np.diff(np.r_[starts, ids.size])
    seg_max = np.maximum.reduceat(scores.data, starts)
    shifted = np.exp(scores.data - np.repeat(seg_max, lengths))
    seg_sum = np.add.reduceat(shifted, starts)
    out_data = shifted / np.repeat(seg_sum, lengths)

    def backward(g):
        gy = g * out_data
        seg_dot = np.add.reduceat(gy, starts)
        _accum(scores, gy - out_data * seg_dot[seg_index])

    return _make(out_data, "segment_softmax", (scores,), backward)


def mean(tensors) -> Tensor:
    """Elementwise mean of a list of same-shape tensors."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("mean: empty input list")
    shape = tensors[0].data.shape
    if any(t.data.shape != shape for t in tensors):
        raise ValueError("mean: shape mismatch across inputs")
    k = len(tensors)
    out_data = tensors[0].data.copy()
    for t in tensors[1:]:
        out_data += t.data
    out_data /= k

    def backward(g):
        gk = g / k
        for t in tensors:
            _accum(t, gk)

    return _make(out_data, "mean", tuple(tensors), backward)


def dot(u: Tensor, v: Tensor) -> Tensor:
    if u.data.ndim != 1 or v.data.ndim != 1 or u.data.shape != v.data.shape:
        raise ValueError(f"dot: shape mismatch {u.data.shape} vs {v.data.shape}")

    def backward(g):
        _accum(u, g * v.data)
        _accum(v, g * u.data)

    return _make(np.dot(u.data, v.data), "dot", (u, v), backward)


def l2_normalize(v: Tensor) -> Tensor:
    if v.data.ndim != 1:
        raise ValueError(f"l2_normalize: expected 1-D, got shape {v.data.shape}")
    norm = float(np.linalg.norm(v.data))
    if norm == 0.0:
        raise ValueError("l2_normalize: zero vector")
    out_data = v.data / norm

    def backward(g):
        _accum(v, (g - out_data * np.dot(out_data, g)) / norm)

    return _make(out_data, "l2_normalize", (v,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out_data, "log", (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""

    def backward(g):
        _accum(a, np.full_like(a.data, float(g)))

    return _make(np.sum(a.data), "sum", (a,), backward)


def mask_columns(a: Tensor, mask) -> Tensor:
    """Zero the columns of a 2-D tensor where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    if a.data.ndim != 2 or mask.shape != (a.data.shape[1],):
        raise ValueError(f"mask_columns: mask shape {mask.shape} vs data {a.data.shape}")
    keep = (~mask).astype(np.float64)

    def backward(g):
        _accum(a, g * keep[None, :])

    return _make(a.data * keep[None, :], "mask_columns", (a,), backward)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Comparison of analytic gradients against central finite differences."""

    max_rel_error: float
    tol: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f, params: dict, eps: float = 1e-5, tol: float = 1e-6) -> GradCheckReport:
    """Check the analytic gradient of ``f`` at every entry of every parameter.

    ``f`` is a zero-argument deterministic callable returning a scalar Tensor;
    ``params`` maps names to the leaf tensors it closes over. Relative error
    is ``|a - n| / max(1, |a|, |n|)``, so near-zero gradients are compared on
    an absolute scale.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    for p in params.values():
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise ValueError("grad_check: non-finite objective value")
    out.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    def evaluate() -> float:
        with no_grad():
            return f().item()

    max_rel = 0.0
    per_param = {}
    for name, p in params.items():
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = evaluate()
            flat[idx] = orig - eps
            f_minus = evaluate()
            flat[idx] = orig
            num_flat[idx] = (f_plus - f_minus) / (2.0 * eps)
        a = analytic[name]
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
        rel = np.abs(a - numeric) / denom
        worst = float(rel.max()) if rel.size else 0.0
        per_param[name] = {"analytic": a, "numeric": numeric, "max_rel_error": worst}
        max_rel = max(max_rel, worst)
    return GradCheckReport(max_rel_error=max_rel, tol=tol, per_param=per_param)
