"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Graph` records every primitive as a :class:`Node` in creation
order. ``backward`` walks that tape once in reverse and returns gradients
for every differentiable leaf, parameters and inputs alike.

Only the primitives the segmentation network and its losses need are
provided. Modules with a bespoke differentiable map (the regional affine
deformation, for instance) register it through :meth:`Graph.custom`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible operand shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(s) for s in shapes))


class GraphIndexError(IndexError):
    """Raised when an index array points outside the indexed rows."""

    def __init__(self, op: str, position: tuple[int, ...], value: int, bound: int):
        self.op = op
        self.position = position
        super().__init__(f"{op}: index {value} at position {position} out of range [0, {bound})")


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    requires_grad: bool = False
    vjp: Vjp | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    arr.setflags(write=False)
    return arr


def _check_index(op: str, index: np.ndarray, bound: int) -> np.ndarray:
    index = np.asarray(index)
    if index.size and not np.issubdtype(index.dtype, np.integer):
        raise TypeError(f"{op}: index array must be integer, got {index.dtype}")
    index = index.astype(np.intp, copy=False)
    bad = (index < 0) | (index >= bound)
    if bad.any():
        pos = tuple(int(p) for p in np.argwhere(bad)[0])
        raise GraphIndexError(op, pos, int(index[pos]), bound)
    return index


class Graph:
    """Ordered record of primitive applications.

    Nodes are appended as primitives run, so an input always precedes the
    nodes that consume it and the tape is acyclic by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: set[int] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, op: str, inputs: Sequence[Node], value: np.ndarray,
                vjp: Vjp | None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        value.setflags(write=False)
        needs = any(x.requires_grad for x in inputs)
        node = Node(len(self.nodes), op, tuple(x.id for x in inputs), value,
                    needs, vjp if needs else None)
        self.nodes.append(node)
        return node

    def _own(self, x: Node) -> Node:
        if not (0 <= x.id < len(self.nodes) and self.nodes[x.id] is x):
            raise ValueError(f"node {x.id} ({x.op}) belongs to a different graph")
        return x

    # -- leaves -----------------------------------------------------------

    def leaf(self, value) -> Node:
        """A differentiable leaf (parameter or input)."""
        node = self._record("leaf", (), _as_array(value), None)
        node.requires_grad = True
        self.leaves.add(node.id)
        return node

    def constant(self, value) -> Node:
        return self._record("constant", (), _as_array(value), None)

    def detach(self, x: Node) -> Node:
        """Same value as ``x``, but gradients stop here."""
        self._own(x)
        return self._record("detach", (), x.value, None)

    # -- primitives -------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        self._own(a), self._own(b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        av, bv = a.value, b.value

        def vjp(g):
            return (g @ bv.T if a.requires_grad else None,
                    av.T @ g if b.requires_grad else None)

        return self._record("matmul", (a, b), av @ bv, vjp)

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise sum; ``b`` may also be a single row broadcast over ``a``."""
        self._own(a), self._own(b)
        if a.shape == b.shape:
            return self._record("add", (a, b), a.value + b.value, lambda g: (g, g))
        if a.value.ndim == 2 and b.value.ndim == 2 and b.shape == (1, a.shape[1]):
            return self._record("add", (a, b), a.value + b.value,
                                lambda g: (g, g.sum(axis=0, keepdims=True)))
        raise ShapeError("add", a.shape, b.shape)

    def mul(self, a: Node, b: Node) -> Node:
        self._own(a), self._own(b)
        if a.shape != b.shape:
            raise ShapeError("mul", a.shape, b.shape)
        av, bv = a.value, b.value
        return self._record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    def scale(self, a: Node, c: float) -> Node:
        self._own(a)
        c = float(c)
        return self._record("scale", (a,), a.value * c, lambda g: (g * c,))

    def sum(self, a: Node) -> Node:
        self._own(a)
        shape = a.shape
        return self._record("sum", (a,), np.array([[a.value.sum()]]),
                            lambda g: (np.full(shape, g.reshape(-1)[0]),))

    def relu(self, a: Node) -> Node:
        self._own(a)
        # subgradient 0 at exactly 0
        mask = a.value > 0
        return self._record("relu", (a,), np.where(mask, a.value, 0.0),
                            lambda g: (g * mask,))

    def concat_columns(self, a: Node, b: Node) -> Node:
        self._own(a), self._own(b)
        if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ShapeError("concat_columns", a.shape, b.shape)
        split = a.shape[1]
        return self._record("concat_columns", (a, b),
                            np.concatenate([a.value, b.value], axis=1),
                            lambda g: (g[:, :split], g[:, split:]))

    def gather_rows(self, a: Node, index) -> Node:
        self._own(a)
        if a.value.ndim != 2:
            raise ShapeError("gather_rows", a.shape, np.shape(index))
        n = a.shape[0]
        index = _check_index("gather_rows", index, n).reshape(-1)
        width = a.shape[1]

        def vjp(g):
            out = np.zeros((n, width))
            np.add.at(out, index, g)
            return (out,)

        return self._record("gather_rows", (a,), a.value[index], vjp)

    def row_max_over_groups(self, a: Node, group_index) -> Node:
        """Row i of the output is the columnwise max of ``a`` over rows ``group_index[i]``.

        The gradient goes to the first row attaining the max.
        """
        self._own(a)
        group_index = np.asarray(group_index)
        if a.value.ndim != 2 or group_index.ndim != 2:
            raise ShapeError("row_max_over_groups", a.shape, group_index.shape)
        n, width = a.shape
        group_index = _check_index("row_max_over_groups", group_index, n)
        best = a.value[group_index[:, 0]]
        src = np.repeat(group_index[:, :1], width, axis=1)
        for j in range(1, group_index.shape[1]):
            cand = a.value[group_index[:, j]]
            better = cand > best  # strict: ties keep the earlier neighbor
            best = np.where(better, cand, best)
            src = np.where(better, group_index[:, j:j + 1], src)
        flat = (src * width + np.arange(width)).reshape(-1)

        def vjp(g):
            out = np.bincount(flat, weights=g.reshape(-1), minlength=n * width)
            return (out.reshape(n, width),)

        return self._record("row_max_over_groups", (a,), best, vjp)

    def softmax_rows(self, a: Node) -> Node:
        self._own(a)
        if a.value.ndim != 2:
            raise ShapeError("softmax_rows", a.shape)
        p = softmax(a.value)
        return self._record("softmax_rows", (a,), p,
                            lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))

    def log_softmax_rows(self, a: Node) -> Node:
        self._own(a)
        if a.value.ndim != 2:
            raise ShapeError("log_softmax_rows", a.shape)
        out = log_softmax(a.value)
        p = np.exp(out)
        return self._record("log_softmax_rows", (a,), out,
                            lambda g: (g - p * g.sum(axis=1, keepdims=True),))

    # -- losses -----------------------------------------------------------

    def kl_divergence_rows(self, p: Node, qlog: Node) -> Node:
        """Mean over rows of sum_j p_j (log p_j - qlog_j), with 0 log 0 = 0."""
        self._own(p), self._own(qlog)
        pv, qv = p.value, qlog.value
        if pv.ndim != 2 or pv.shape != qv.shape:
            raise ShapeError("kl_divergence_rows", pv.shape, qv.shape)
        if (pv < -1e-12).any():
            pos = tuple(int(i) for i in np.argwhere(pv < -1e-12)[0])
            raise ValueError(f"kl_divergence_rows: negative probability {pv[pos]} at {pos}")
        n = pv.shape[0]
        positive = pv > 0
        logp = np.log(np.where(positive, pv, 1.0))
        terms = np.where(positive, pv * (logp - qv), 0.0)

        def vjp(g):
            g = g.reshape(-1)[0] / n
            dp = np.where(positive, logp - qv + 1.0, 0.0) * g if p.requires_grad else None
            return dp, -pv * g

        return self._record("kl_divergence_rows", (p, qlog),
                            np.array([[terms.sum() / n]]), vjp)

    def kl_divergence_logits(self, a: Node, b: Node) -> Node:
        """KL(softmax(a) || softmax(b)) averaged over rows.

        Both sides go through the same log-softmax, so equal logits give
        exactly zero.
        """
        self._own(a), self._own(b)
        if a.value.ndim != 2 or a.shape != b.shape:
            raise ShapeError("kl_divergence_logits", a.shape, b.shape)
        n = a.shape[0]
        la, lb = log_softmax(a.value), log_softmax(b.value)
        pa, pb = np.exp(la), np.exp(lb)
        diff = la - lb
        rows = (pa * diff).sum(axis=1, keepdims=True)

        def vjp(g):
            g = g.reshape(-1)[0] / n
            da = pa * (diff - rows) * g if a.requires_grad else None
            return da, (pb - pa) * g

        return self._record("kl_divergence_logits", (a, b), np.array([[rows.sum() / n]]), vjp)

    def cross_entropy_sparse(self, logits: Node, indices, classes) -> Node:
        """Mean of -log_softmax(logits)[i, y_i] over the labeled rows only."""
        self._own(logits)
        lv = logits.value
        if lv.ndim != 2:
            raise ShapeError("cross_entropy_sparse", lv.shape)
        indices = np.asarray(indices)
        classes = np.asarray(classes)
        if indices.size == 0:
            raise ValueError("cross_entropy_sparse: no supervision")
        if indices.shape != classes.shape:
            raise ShapeError("cross_entropy_sparse", indices.shape, classes.shape)
        indices = _check_index("cross_entropy_sparse", indices, lv.shape[0])
        classes = _check_index("cross_entropy_sparse", classes, lv.shape[1])
        m = indices.size
        logp = log_softmax(lv[indices])
        value = -logp[np.arange(m), classes].sum() / m

        def vjp(g):
            g = g.reshape(-1)[0] / m
            rows = np.exp(logp)
            rows[np.arange(m), classes] -= 1.0
            out = np.zeros_like(lv)
            np.add.at(out, indices, rows * g)
            return (out,)

        return self._record("cross_entropy_sparse", (logits,), np.array([[value]]), vjp)

    # -- extension point --------------------------------------------------

    def custom(self, op: str, inputs: Sequence[Node], value: np.ndarray, vjp: Vjp) -> Node:
        """Record a primitive defined elsewhere. ``vjp`` maps the output
        gradient to one gradient (or None) per input."""
        for x in inputs:
            self._own(x)
        return self._record(op, tuple(inputs), value, vjp)

    # -- reverse pass -----------------------------------------------------

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` for every differentiable leaf, keyed by node id.

        Leaves that do not reach the loss get zero arrays.
        """
        self._own(loss)
        if loss.value.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.id + 1)
        grads[loss.id] = np.ones_like(loss.value)
        for node in reversed(self.nodes[:loss.id + 1]):
            g = grads[node.id]
            if g is None or node.vjp is None:
                continue
            for src, gin in zip(node.inputs, node.vjp(g)):
                if gin is None or not self.nodes[src].requires_grad:
                    continue
                if grads[src] is None:
                    grads[src] = np.array(gin, dtype=np.float64)
                else:
                    grads[src] = grads[src] + gin
            if node.id not in self.leaves:
                grads[node.id] = None
        out = {}
        for leaf in sorted(self.leaves):
            g = grads[leaf] if leaf < len(grads) else None
            out[leaf] = g if g is not None else np.zeros_like(self.nodes[leaf].value)
        return out


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))
