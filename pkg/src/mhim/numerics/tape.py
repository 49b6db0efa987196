"""Dense float64 matrices and a small reverse-mode tape.

The tape only knows the kernels the MIL framework needs: matmul,
broadcasting elementwise maths, row softmax / log-softmax, reductions,
row/column concatenation and slicing, and row gathers.  Index selection
(sorting, top-k, masking) happens outside the tape; the tape sees the
result as a ``gather_rows`` node.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from . import kernels


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


class ParameterError(ValueError):
    pass


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {a.shape}")
    return a


class Node:
    """One value on the tape.  ``grad`` is filled by :meth:`Tape.backward`."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "trainable", "name")

    def __init__(self, value: np.ndarray, parents=(), backward_fn=None,
                 requires_grad=False, trainable=False, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.name or 'op'}, shape={self.value.shape})"


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return g.sum().reshape(1, 1)
    if shape[0] == 1 and g.shape[1] == shape[1]:
        return g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[0] == shape[0]:
        return g.sum(axis=1, keepdims=True)
    raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    sa, sb = a.shape, b.shape
    if sa == sb or sa == (1, 1) or sb == (1, 1):
        return
    for big, small in ((sa, sb), (sb, sa)):
        if small == (1, big[1]) or small == (big[0], 1):
            return
    raise DimensionError(f"{op}: shapes {sa} and {sb} do not broadcast")


class Tape:
    """Records primitive ops in order; ``backward`` walks them in reverse.

    ``record=False`` evaluates the same ops without keeping any graph, which
    is how the teacher and inference paths run.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self._params: dict[tuple[int, str], Node] = {}

    # -- leaves ------------------------------------------------------------

    def constant(self, value, name=None) -> Node:
        return Node(as_matrix(value), name=name)

    def leaf(self, value, trainable=True, name=None) -> Node:
        node = Node(as_matrix(value), requires_grad=trainable and self.record,
                    trainable=trainable, name=name)
        if self.record:
            self.nodes.append(node)
        return node

    def param(self, store: Mapping[str, np.ndarray], name: str, trainable: bool = True) -> Node:
        """Leaf for ``store[name]``, created once per tape and reused."""
        key = (id(store), name)
        node = self._params.get(key)
        if node is None:
            node = self.leaf(store[name], trainable=trainable, name=name)
            self._params[key] = node
        return node

    def gradients(self, store: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for (sid, name), node in self._params.items():
            if sid == id(store) and node.trainable:
                g = node.grad if node.grad is not None else np.zeros_like(node.value)
                out[name] = g
        return out

    def _op(self, value: np.ndarray, parents: tuple, backward_fn: Callable, name: str) -> Node:
        if self.record and any(p.requires_grad for p in parents):
            node = Node(value, parents, backward_fn, requires_grad=True, name=name)
            self.nodes.append(node)
            return node
        return Node(value, name=name)

    # -- kernels -----------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.shape[1] != b.value.shape[0]:
            raise DimensionError(f"matmul: shapes {a.value.shape} and {b.value.shape} do not align")
        out = a.value @ b.value

        def back(g):
            return (g @ b.value.T if a.requires_grad else None,
                    a.value.T @ g if b.requires_grad else None)

        return self._op(out, (a, b), back, "matmul")

    def add(self, a: Node, b: Node) -> Node:
        _check_broadcast(a.value, b.value, "add")
        sa, sb = a.value.shape, b.value.shape

        def back(g):
            return _reduce_to(g, sa), _reduce_to(g, sb)

        return self._op(a.value + b.value, (a, b), back, "add")

    def sub(self, a: Node, b: Node) -> Node:
        _check_broadcast(a.value, b.value, "sub")
        sa, sb = a.value.shape, b.value.shape

        def back(g):
            return _reduce_to(g, sa), -_reduce_to(g, sb)

        return self._op(a.value - b.value, (a, b), back, "sub")

    def mul(self, a: Node, b: Node) -> Node:
        _check_broadcast(a.value, b.value, "mul")
        av, bv = a.value, b.value

        def back(g):
            return _reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)

        return self._op(av * bv, (a, b), back, "mul")

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)
        return self._op(a.value * c, (a,), lambda g: (g * c,), "scale")

    def sigmoid(self, a: Node) -> Node:
        x = a.value
        # split by sign so exp never overflows
        ex = np.exp(-np.abs(x))
        y = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
        return self._op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def tanh(self, a: Node) -> Node:
        y = np.tanh(a.value)
        return self._op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")

    def relu(self, a: Node) -> Node:
        mask = a.value > 0
        return self._op(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")

    def exp(self, a: Node) -> Node:
        with np.errstate(over="ignore"):
            y = np.exp(a.value)
        if not np.all(np.isfinite(y)):
            raise NumericError("exp overflowed")
        return self._op(y, (a,), lambda g: (g * y,), "exp")

    def log(self, a: Node) -> Node:
        x = a.value
        if np.any(x <= 0):
            raise NumericError("log of a non-positive value")
        return self._op(np.log(x), (a,), lambda g: (g / x,), "log")

    def softmax(self, a: Node, temperature: float = 1.0) -> Node:
        """Row-wise softmax of ``a / temperature``."""
        if not temperature > 0:
            raise ParameterError(f"temperature must be positive, got {temperature}")
        y = kernels.softmax_rows(np.ascontiguousarray(a.value), float(temperature))

        def back(g):
            return (kernels.softmax_rows_backward(y, np.ascontiguousarray(g), float(temperature)),)

        return self._op(y, (a,), back, "softmax")

    def log_softmax(self, a: Node) -> Node:
        x = a.value
        z = x - x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        y = z - lse
        p = np.exp(y)

        def back(g):
            return (g - p * g.sum(axis=1, keepdims=True),)

        return self._op(y, (a,), back, "log_softmax")

    def sum(self, a: Node) -> Node:
        shape = a.value.shape
        return self._op(a.value.sum().reshape(1, 1), (a,),
                        lambda g: (np.broadcast_to(g, shape).copy(),), "sum")

    def mean(self, a: Node) -> Node:
        shape = a.value.shape
        n = a.value.size
        return self._op(np.full((1, 1), a.value.mean()), (a,),
                        lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")

    def transpose(self, a: Node) -> Node:
        return self._op(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")

    def concat_rows(self, parts: Iterable[Node]) -> Node:
        parts = tuple(parts)
        cols = {p.value.shape[1] for p in parts}
        if len(cols) != 1:
            raise DimensionError(f"concat_rows: column counts differ {sorted(cols)}")
        bounds = np.cumsum([0] + [p.value.shape[0] for p in parts])
        out = np.concatenate([p.value for p in parts], axis=0)

        def back(g):
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

        return self._op(out, parts, back, "concat_rows")

    def concat_cols(self, parts: Iterable[Node]) -> Node:
        parts = tuple(parts)
        rows = {p.value.shape[0] for p in parts}
        if len(rows) != 1:
            raise DimensionError(f"concat_cols: row counts differ {sorted(rows)}")
        bounds = np.cumsum([0] + [p.value.shape[1] for p in parts])
        out = np.concatenate([p.value for p in parts], axis=1)

        def back(g):
            return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

        return self._op(out, parts, back, "concat_cols")

    def slice_cols(self, a: Node, start: int, stop: int) -> Node:
        shape = a.value.shape

        def back(g):
            full = np.zeros(shape)
            full[:, start:stop] = g
            return (full,)

        return self._op(a.value[:, start:stop].copy(), (a,), back, "slice_cols")

    def slice_rows(self, a: Node, start: int, stop: int) -> Node:
        shape = a.value.shape

        def back(g):
            full = np.zeros(shape)
            full[start:stop] = g
            return (full,)

        return self._op(a.value[start:stop].copy(), (a,), back, "slice_rows")

    def gather_rows(self, a: Node, idx) -> Node:
        idx = np.asarray(idx, dtype=np.int64)
        n = a.value.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"gather_rows: index out of range for {n} rows")
        shape = a.value.shape
        unique = np.unique(idx).size == idx.size

        def back(g):
            full = np.zeros(shape)
            if unique:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return self._op(a.value[idx], (a,), back, "gather_rows")

    # -- reverse pass ------------------------------------------------------

    def backward(self, loss: Node) -> None:
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if not loss.requires_grad:
            return
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                # never updated in place, so aliasing another node's buffer is safe
                parent.grad = g if parent.grad is None else parent.grad + g
