"""Reverse-mode automatic differentiation over dense float64 matrices.

A ``Graph`` is a tape: every primitive op appends one node, so insertion
order is already a topological order. ``backward`` walks the tape in
reverse from the loss node and accumulates gradients into every tensor
reachable from it. All values are 2-d numpy arrays of float64; vectors
are rows or columns by caller convention.

Numerical policy: ``exp`` clamps its input to ``[-EXP_CLAMP, EXP_CLAMP]``
and ``log`` floors its input at ``exp(-EXP_CLAMP)``; the backward pass
uses the true derivative of the clamped function (zero outside the
window), so finite-difference checks stay consistent.

Thread contract: a graph and its tensors belong to one thread from
construction through backward. Distinct graphs on distinct threads are
independent.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

EXP_CLAMP = 50.0
LOG_FLOOR = float(np.exp(-EXP_CLAMP))

OP_KINDS = (
    "matmul", "add", "sub", "mul_elem", "tanh", "sigmoid", "exp", "log",
    "softmax_rows", "concat_cols", "concat_rows", "slice_cols",
    "gather_rows", "clip", "sum", "mean", "scale",
)


class ShapeMismatch(ValueError):
    """Raised when operand shapes do not conform to an op."""


class GraphError(RuntimeError):
    """Raised on graph-protocol violations (wrong graph, repeated backward, ...)."""


class GradCheckError(RuntimeError):
    """Raised when a gradient check hits a non-finite function value."""


class Tensor:
    """A value plus its accumulated gradient inside one graph.

    ``grad`` is all-zero from creation until ``Graph.backward`` runs.
    ``node_id`` is the tensor's position on the tape and is only
    meaningful within its own graph.
    """

    __slots__ = ("values", "grad", "node_id", "graph")

    def __init__(self, values: np.ndarray, node_id: int, graph: "Graph"):
        self.values = values
        self.grad = np.zeros_like(values)
        self.node_id = node_id
        self.graph = graph

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __repr__(self) -> str:
        return f"Tensor(node_id={self.node_id}, shape={self.values.shape})"


class _Node:
    __slots__ = ("tensor", "inputs", "forward", "backward", "kind")

    def __init__(self, tensor, inputs, forward, backward, kind):
        self.tensor = tensor
        self.inputs = inputs
        self.forward = forward
        self.backward = backward
        self.kind = kind


def _as_matrix(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeMismatch(f"tensors are at most rank 2, got shape {arr.shape}")
    return arr


class Graph:
    """Tape of primitive operations; build forward, then call backward once."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._backward_done = False

    def __len__(self) -> int:
        return len(self._nodes)

    # -- construction ----------------------------------------------------

    def _register(self, values, inputs, forward, backward, kind) -> Tensor:
        t = Tensor(values, len(self._nodes), self)
        self._nodes.append(_Node(t, inputs, forward, backward, kind))
        return t

    def _check_inputs(self, kind, inputs):
        for t in inputs:
            if t.graph is not self:
                raise GraphError(f"{kind}: input tensor belongs to a different graph")

    def leaf(self, values) -> Tensor:
        """Register an input tensor (parameter, data, or constant)."""
        return self._register(_as_matrix(values), (), None, None, "leaf")

    def scalar(self, value: float) -> Tensor:
        return self.leaf(np.array([[float(value)]]))

    def apply(self, op_kind: str, *inputs: Tensor, **kwargs) -> Tensor:
        """Dispatch by op name; the named methods are the primary API."""
        if op_kind not in OP_KINDS:
            raise ValueError(f"unknown op kind: {op_kind!r}")
        return getattr(self, op_kind)(*inputs, **kwargs)

    # -- primitives ------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_inputs("matmul", (a, b))
        if a.values.shape[1] != b.values.shape[0]:
            raise ShapeMismatch(
                f"matmul: inner dims differ, {a.values.shape} @ {b.values.shape}")
        out = self._register(a.values @ b.values, (a, b), None, None, "matmul")

        def forward():
            out.values = a.values @ b.values

        def backward():
            a.grad += out.grad @ b.values.T
            b.grad += a.values.T @ out.grad

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def _addsub(self, a, b, sign, kind):
        self._check_inputs(kind, (a, b))
        sa, sb = a.values.shape, b.values.shape
        # Equal shapes, or a row-vector bias on either side.
        a_row = sa != sb and sa[0] == 1 and sa[1] == sb[1]
        b_row = sa != sb and sb[0] == 1 and sb[1] == sa[1]
        if sa != sb and not a_row and not b_row:
            raise ShapeMismatch(f"{kind}: incompatible shapes {sa} and {sb}")
        op = (lambda: a.values + b.values) if sign > 0 else (lambda: a.values - b.values)
        out = self._register(op(), (a, b), None, None, kind)

        def forward():
            out.values = op()

        def backward():
            if a_row:
                a.grad += out.grad.sum(axis=0, keepdims=True)
            else:
                a.grad += out.grad
            gb = out.grad.sum(axis=0, keepdims=True) if b_row else out.grad
            if sign > 0:
                b.grad += gb
            else:
                b.grad -= gb

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self._addsub(a, b, +1, "add")

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self._addsub(a, b, -1, "sub")

    def mul_elem(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_inputs("mul_elem", (a, b))
        if a.values.shape != b.values.shape:
            raise ShapeMismatch(
                f"mul_elem: shapes differ, {a.values.shape} vs {b.values.shape}")
        out = self._register(a.values * b.values, (a, b), None, None, "mul_elem")

        def forward():
            out.values = a.values * b.values

        def backward():
            a.grad += out.grad * b.values
            b.grad += out.grad * a.values

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def tanh(self, a: Tensor) -> Tensor:
        self._check_inputs("tanh", (a,))
        out = self._register(np.tanh(a.values), (a,), None, None, "tanh")

        def forward():
            out.values = np.tanh(a.values)

        def backward():
            a.grad += out.grad * (1.0 - out.values * out.values)

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def sigmoid(self, a: Tensor) -> Tensor:
        self._check_inputs("sigmoid", (a,))

        def op():
            return 1.0 / (1.0 + np.exp(-np.clip(a.values, -EXP_CLAMP, EXP_CLAMP)))

        out = self._register(op(), (a,), None, None, "sigmoid")

        def forward():
            out.values = op()

        def backward():
            a.grad += out.grad * out.values * (1.0 - out.values)

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def exp(self, a: Tensor) -> Tensor:
        self._check_inputs("exp", (a,))

        def op():
            return np.exp(np.clip(a.values, -EXP_CLAMP, EXP_CLAMP))

        out = self._register(op(), (a,), None, None, "exp")

        def forward():
            out.values = op()

        def backward():
            inside = (a.values > -EXP_CLAMP) & (a.values < EXP_CLAMP)
            a.grad += out.grad * out.values * inside

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def log(self, a: Tensor) -> Tensor:
        self._check_inputs("log", (a,))

        def op():
            return np.log(np.maximum(a.values, LOG_FLOOR))

        out = self._register(op(), (a,), None, None, "log")

        def forward():
            out.values = op()

        def backward():
            inside = a.values > LOG_FLOOR
            a.grad += out.grad * inside / np.maximum(a.values, LOG_FLOOR)

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def softmax_rows(self, a: Tensor) -> Tensor:
        self._check_inputs("softmax_rows", (a,))

        def op():
            shifted = a.values - a.values.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            return e / e.sum(axis=1, keepdims=True)

        out = self._register(op(), (a,), None, None, "softmax_rows")

        def forward():
            out.values = op()

        def backward():
            y = out.values
            dot = (out.grad * y).sum(axis=1, keepdims=True)
            a.grad += y * (out.grad - dot)

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def concat_cols(self, *inputs: Tensor) -> Tensor:
        self._check_inputs("concat_cols", inputs)
        rows = {t.values.shape[0] for t in inputs}
        if len(rows) != 1:
            raise ShapeMismatch(
                f"concat_cols: row counts differ: {[t.values.shape for t in inputs]}")
        out = self._register(np.hstack([t.values for t in inputs]),
                             inputs, None, None, "concat_cols")

        def forward():
            out.values = np.hstack([t.values for t in inputs])

        def backward():
            lo = 0
            for t in inputs:
                hi = lo + t.values.shape[1]
                t.grad += out.grad[:, lo:hi]
                lo = hi

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def concat_rows(self, *inputs: Tensor) -> Tensor:
        self._check_inputs("concat_rows", inputs)
        cols = {t.values.shape[1] for t in inputs}
        if len(cols) != 1:
            raise ShapeMismatch(
                f"concat_rows: column counts differ: {[t.values.shape for t in inputs]}")
        out = self._register(np.vstack([t.values for t in inputs]),
                             inputs, None, None, "concat_rows")

        def forward():
            out.values = np.vstack([t.values for t in inputs])

        def backward():
            lo = 0
            for t in inputs:
                hi = lo + t.values.shape[0]
                t.grad += out.grad[lo:hi, :]
                lo = hi

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def slice_cols(self, a: Tensor, lo: int, hi: int) -> Tensor:
        self._check_inputs("slice_cols", (a,))
        if not (0 <= lo < hi <= a.values.shape[1]):
            raise ShapeMismatch(
                f"slice_cols: bounds [{lo}, {hi}) invalid for shape {a.values.shape}")
        out = self._register(a.values[:, lo:hi].copy(), (a,), None, None, "slice_cols")

        def forward():
            out.values = a.values[:, lo:hi].copy()

        def backward():
            a.grad[:, lo:hi] += out.grad

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def gather_rows(self, a: Tensor, ids: Sequence[int]) -> Tensor:
        self._check_inputs("gather_rows", (a,))
        idx = np.asarray(ids, dtype=np.intp)
        if idx.ndim != 1 or idx.size == 0:
            raise ShapeMismatch("gather_rows: ids must be a non-empty 1-d index list")
        if idx.min() < 0 or idx.max() >= a.values.shape[0]:
            raise ShapeMismatch(
                f"gather_rows: index out of range for {a.values.shape[0]} rows")
        out = self._register(a.values[idx, :], (a,), None, None, "gather_rows")

        def forward():
            out.values = a.values[idx, :]

        def backward():
            np.add.at(a.grad, idx, out.grad)

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def clip(self, a: Tensor, lo: float, hi: float) -> Tensor:
        self._check_inputs("clip", (a,))
        out = self._register(np.clip(a.values, lo, hi), (a,), None, None, "clip")

        def forward():
            out.values = np.clip(a.values, lo, hi)

        def backward():
            inside = (a.values > lo) & (a.values < hi)
            a.grad += out.grad * inside

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def sum(self, a: Tensor) -> Tensor:
        self._check_inputs("sum", (a,))
        out = self._register(np.array([[a.values.sum()]]), (a,), None, None, "sum")

        def forward():
            out.values = np.array([[a.values.sum()]])

        def backward():
            a.grad += out.grad[0, 0]

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def mean(self, a: Tensor) -> Tensor:
        self._check_inputs("mean", (a,))
        n = a.values.size
        out = self._register(np.array([[a.values.mean()]]), (a,), None, None, "mean")

        def forward():
            out.values = np.array([[a.values.mean()]])

        def backward():
            a.grad += out.grad[0, 0] / n

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def scale(self, a: Tensor, c: float) -> Tensor:
        self._check_inputs("scale", (a,))
        c = float(c)
        out = self._register(a.values * c, (a,), None, None, "scale")

        def forward():
            out.values = a.values * c

        def backward():
            a.grad += out.grad * c

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    def custom(self, values, inputs: Sequence[Tensor],
               vjp: Callable[[np.ndarray], Sequence[np.ndarray]],
               recompute: Callable[[], np.ndarray] | None = None,
               kind: str = "custom") -> Tensor:
        """Register an externally computed op.

        ``vjp(out_grad)`` must return one gradient contribution per input,
        each matching that input's shape. ``recompute`` supports replay;
        without it the node is treated as constant under replay.
        """
        self._check_inputs(kind, inputs)
        inputs = tuple(inputs)
        out = self._register(_as_matrix(values), inputs, None, None, kind)

        def forward():
            if recompute is not None:
                out.values = _as_matrix(recompute())

        def backward():
            contribs = vjp(out.grad)
            if len(contribs) != len(inputs):
                raise GraphError(f"{kind}: vjp returned {len(contribs)} grads "
                                 f"for {len(inputs)} inputs")
            for t, c in zip(inputs, contribs):
                t.grad += c

        self._nodes[out.node_id].forward = forward
        self._nodes[out.node_id].backward = backward
        return out

    # -- execution -------------------------------------------------------

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d loss / d tensor into every tensor reachable from loss.

        Returns a map node_id -> grad array covering every node in the
        graph; leaves not reachable from the loss keep their zero grad.
        A second backward without an intervening replay is rejected.
        """
        if loss.graph is not self:
            raise GraphError("backward: loss belongs to a different graph")
        if loss.values.shape != (1, 1):
            raise GraphError(f"backward: loss must have shape (1, 1), "
                             f"got {loss.values.shape}")
        if self._backward_done:
            raise GraphError("backward already ran on this graph; "
                             "call replay() or rebuild before running again")
        self._backward_done = True

        reachable = np.zeros(len(self._nodes), dtype=bool)
        stack = [loss.node_id]
        while stack:
            nid = stack.pop()
            if reachable[nid]:
                continue
            reachable[nid] = True
            for t in self._nodes[nid].inputs:
                if not reachable[t.node_id]:
                    stack.append(t.node_id)

        loss.grad[...] = 1.0
        for nid in range(loss.node_id, -1, -1):
            if reachable[nid]:
                node = self._nodes[nid]
                if node.backward is not None:
                    node.backward()
        return {n.tensor.node_id: n.tensor.grad for n in self._nodes}

    def replay(self) -> None:
        """Recompute every node's value from the current leaves, in tape order.

        Grads are reset to zero and the graph becomes eligible for a new
        backward pass. With unchanged leaves the recomputed values are
        bit-identical to the original forward pass.
        """
        for node in self._nodes:
            if node.forward is not None:
                node.forward()
            node.tensor.grad = np.zeros_like(node.tensor.values)
        self._backward_done = False


def grad_check(build: Callable[[Graph, list[Tensor]], Tensor],
               params: Sequence[np.ndarray], eps: float = 1e-6) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    ``build(graph, tensors)`` must construct and return a (1, 1) loss from
    the given leaf tensors, deterministically (freeze any noise inputs).
    Returns max over all parameter entries of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    arrays = [np.array(p, dtype=np.float64) for p in params]

    g = Graph()
    tensors = [g.leaf(p.copy()) for p in arrays]
    loss = build(g, tensors)
    g.backward(loss)
    analytic = [t.grad.copy() for t in tensors]

    def eval_at(which, flat_idx, delta):
        trial = [p.copy() for p in arrays]
        trial[which].reshape(-1)[flat_idx] += delta
        gg = Graph()
        out = build(gg, [gg.leaf(p) for p in trial])
        v = float(out.values[0, 0])
        if not np.isfinite(v):
            raise GradCheckError(
                f"non-finite value {v} at param {which}, entry {flat_idx}, "
                f"perturbation {delta:+.3g}")
        return v

    max_err = 0.0
    for k, p in enumerate(arrays):
        ana_flat = analytic[k].reshape(-1)
        for j in range(p.size):
            num = (eval_at(k, j, eps) - eval_at(k, j, -eps)) / (2.0 * eps)
            err = abs(ana_flat[j] - num) / max(1.0, abs(ana_flat[j]), abs(num))
            if err > max_err:
                max_err = err
    return max_err
