"""Reverse-mode automatic differentiation over static scalar expression graphs.

A :class:`Graph` is a tape of scalar operations built once and evaluated many
times.  Nodes are identified by integer ids; operands always precede their
consumers, so a single forward sweep evaluates the whole tape and a single
reverse sweep accumulates adjoints.  Values may be plain floats or 1-D arrays:
feeding an array for an input node evaluates the same scalar graph elementwise
over a batch, which is how the trainer runs its full-batch loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Operation tags.
INPUT = 0
CONST = 1
ADD = 2
SUB = 3
MUL = 4
DIV = 5
NEG = 6
TANH = 7
EXP = 8
SQRT = 9

_UNARY = (NEG, TANH, EXP, SQRT)
_BINARY = (ADD, SUB, MUL, DIV)


class DomainError(ArithmeticError):
    """Forward evaluation left the operation's domain (div by zero, sqrt < 0)."""

    def __init__(self, node_id, message):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


class UnsupportedDimensionError(ValueError):
    """Raised for determinant expansions beyond the supported size."""


@dataclass(frozen=True)
class Expr:
    """Handle to one node of a :class:`Graph`.

    Supports arithmetic operators so expressions read naturally; plain numbers
    on either side are promoted to constant nodes.
    """

    graph: "Graph"
    id: int

    def _lift(self, other):
        if isinstance(other, Expr):
            if other.graph is not self.graph:
                raise ValueError("cannot mix expressions from different graphs")
            return other
        return self.graph.const(float(other))

    def __add__(self, other):
        return self.graph._emit(ADD, self.id, self._lift(other).id)

    def __radd__(self, other):
        return self._lift(other).__add__(self)

    def __sub__(self, other):
        return self.graph._emit(SUB, self.id, self._lift(other).id)

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        return self.graph._emit(MUL, self.id, self._lift(other).id)

    def __rmul__(self, other):
        return self._lift(other).__mul__(self)

    def __truediv__(self, other):
        return self.graph._emit(DIV, self.id, self._lift(other).id)

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        return self.graph._emit(NEG, self.id, -1)

    @property
    def value(self):
        """Cached value from the most recent forward pass."""
        return self.graph.value_of(self.id)


def tanh(x: Expr) -> Expr:
    return x.graph._emit(TANH, x.id, -1)


def exp(x: Expr) -> Expr:
    return x.graph._emit(EXP, x.id, -1)


def sqrt(x: Expr) -> Expr:
    return x.graph._emit(SQRT, x.id, -1)


class Gradient:
    """Adjoints of one reverse sweep, queryable by node.

    ``wrt`` returns the partial derivative of the seeded output(s) with respect
    to any node; ``by_input`` maps every input node id to its partial.
    """

    def __init__(self, graph, adjoints):
        self._graph = graph
        self._adjoints = adjoints

    def wrt(self, node):
        nid = node.id if isinstance(node, Expr) else int(node)
        return _unbatch(self._adjoints[nid])

    def sum_wrt(self, node):
        """Batch-summed adjoint; the gradient of a summed-over-batch output."""
        nid = node.id if isinstance(node, Expr) else int(node)
        return float(self._adjoints[nid].sum())

    def by_input(self):
        return {nid: _unbatch(self._adjoints[nid]) for nid in self._graph.input_ids}


def _unbatch(row):
    return float(row[0]) if row.shape == (1,) else row.copy()


class Graph:
    """Static acyclic tape of scalar expressions.

    Structure is immutable once built (only cached values change between
    forward passes), so one instance is single-threaded while independent
    instances may be evaluated concurrently.
    """

    def __init__(self):
        self._ops: list[int] = []
        self._lhs: list[int] = []
        self._rhs: list[int] = []
        self._const: list[float] = []
        self.input_ids: list[int] = []
        self._vals: list[np.ndarray] | None = None
        self._batch = 0
        self._buffers: list[np.ndarray] | None = None

    # -- construction ------------------------------------------------------

    def __len__(self):
        return len(self._ops)

    def input(self) -> Expr:
        e = self._emit(INPUT, -1, -1)
        self.input_ids.append(e.id)
        return e

    def inputs(self, count: int) -> list[Expr]:
        return [self.input() for _ in range(count)]

    def const(self, value: float) -> Expr:
        e = self._emit(CONST, -1, -1)
        self._const[-1] = float(value)
        return e

    def _emit(self, op, a, b) -> Expr:
        nid = len(self._ops)
        self._ops.append(op)
        self._lhs.append(a)
        self._rhs.append(b)
        self._const.append(0.0)
        self._buffers = None
        return Expr(self, nid)

    # -- evaluation --------------------------------------------------------

    def forward(self, inputs) -> np.ndarray:
        """Evaluate every node given one value per input node.

        ``inputs`` holds scalars and/or equal-length 1-D arrays, one entry per
        input node in creation order.  Returns the cached value array of the
        final node; every node's value is retrievable via ``value_of``.
        Re-running with identical inputs reproduces values bitwise.
        """
        if len(inputs) != len(self.input_ids):
            raise ValueError(
                f"expected {len(self.input_ids)} inputs, got {len(inputs)}"
            )
        rows = []
        batch = 1
        for v in inputs:
            arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
            if arr.ndim != 1:
                raise ValueError("inputs must be scalars or 1-D arrays")
            if arr.shape[0] > 1:
                if batch > 1 and arr.shape[0] != batch:
                    raise ValueError("batched inputs must share one length")
                batch = arr.shape[0]
            rows.append(arr)

        ops, lhs, rhs, const = self._ops, self._lhs, self._rhs, self._const
        n = len(ops)
        if self._buffers is None or self._batch != batch:
            self._buffers = [None] * n
            self._batch = batch
        vals = self._buffers
        it = iter(rows)
        for i in range(n):
            op = ops[i]
            if op == INPUT:
                vals[i] = next(it)
                continue
            if op == CONST:
                if vals[i] is None or vals[i].shape != (1,):
                    vals[i] = np.empty(1)
                vals[i][0] = const[i]
                continue
            a = vals[lhs[i]]
            if op in _BINARY:
                b = vals[rhs[i]]
                size = max(a.shape[0], b.shape[0])
            else:
                b = None
                size = a.shape[0]
            out = vals[i]
            if out is None or out.shape[0] != size or out is a or out is b:
                out = np.empty(size)
                vals[i] = out
            if op == ADD:
                np.add(a, b, out=out)
            elif op == MUL:
                np.multiply(a, b, out=out)
            elif op == SUB:
                np.subtract(a, b, out=out)
            elif op == DIV:
                if np.any(b == 0.0):
                    raise DomainError(i, "division by zero")
                np.divide(a, b, out=out)
            elif op == NEG:
                np.negative(a, out=out)
            elif op == TANH:
                np.tanh(a, out=out)
            elif op == EXP:
                np.exp(a, out=out)
            elif op == SQRT:
                if np.any(a < 0.0):
                    raise DomainError(i, "square root of negative value")
                np.sqrt(a, out=out)
            else:
                raise AssertionError(f"unknown op {op}")
        self._vals = vals
        return vals[n - 1].copy() if n else np.empty(0)

    def value_of(self, node):
        nid = node.id if isinstance(node, Expr) else int(node)
        if self._vals is None:
            raise RuntimeError("forward has not been run")
        return _unbatch(self._vals[nid])

    def backward(self, output, seed=1.0) -> Gradient:
        """Reverse sweep from ``output``; returns adjoints for every node."""
        nid = output.id if isinstance(output, Expr) else int(output)
        if not 0 <= nid < len(self._ops):
            raise KeyError(f"node {nid} not in graph")
        return self.backward_multi({nid: seed})

    def backward_multi(self, seeds: dict) -> Gradient:
        """Reverse sweep accumulating several seeded outputs at once.

        ``seeds`` maps node id (or Expr) to the adjoint injected at that node;
        array seeds follow the forward batch.  Equivalent to the gradient of
        ``sum_k seed_k * node_k``.
        """
        if self._vals is None:
            raise RuntimeError("forward has not been run")
        ops, lhs, rhs, vals = self._ops, self._lhs, self._rhs, self._vals
        n = len(ops)
        batch = self._batch
        adj = [None] * n
        for node, seed in seeds.items():
            nid = node.id if isinstance(node, Expr) else int(node)
            if not 0 <= nid < n:
                raise KeyError(f"node {nid} not in graph")
            s = np.atleast_1d(np.asarray(seed, dtype=np.float64))
            if adj[nid] is None:
                adj[nid] = np.zeros(batch)
            adj[nid] += s

        def acc(idx, term):
            if adj[idx] is None:
                adj[idx] = np.zeros(batch)
            adj[idx] += term

        for i in range(n - 1, -1, -1):
            if adj[i] is None:
                continue
            op = ops[i]
            if op in (INPUT, CONST):
                continue
            a = lhs[i]
            g = adj[i]
            if op == ADD:
                acc(a, g)
                acc(rhs[i], g)
            elif op == MUL:
                acc(a, g * vals[rhs[i]])
                acc(rhs[i], g * vals[a])
            elif op == SUB:
                acc(a, g)
                acc(rhs[i], -g)
            elif op == DIV:
                b = rhs[i]
                acc(a, g / vals[b])
                acc(b, -g * vals[i] / vals[b])
            elif op == NEG:
                acc(a, -g)
            elif op == TANH:
                acc(a, g * (1.0 - vals[i] * vals[i]))
            elif op == EXP:
                acc(a, g * vals[i])
            elif op == SQRT:
                acc(a, g / (2.0 * vals[i]))
        zero = np.zeros(1)
        full = [row if row is not None else zero for row in adj]
        return Gradient(self, full)


def det_leading_minors(matrix) -> list[Expr]:
    """Leading principal minors of a square Expr matrix, as new graph nodes.

    Element ``i`` (1-based) is the determinant of the top-left ``i x i``
    submatrix, expanded in closed form; sizes above 4 are not supported.
    """
    n = len(matrix)
    if n == 0 or any(len(row) != n for row in matrix):
        raise ValueError("matrix must be square and non-empty")
    if n > 4:
        raise UnsupportedDimensionError(
            f"leading minors implemented for n <= 4, got n = {n}"
        )
    return [_det([row[: k + 1] for row in matrix[: k + 1]]) for k in range(n)]


def _det(m) -> Expr:
    n = len(m)
    if n == 1:
        return m[0][0]
    if n == 2:
        return m[0][0] * m[1][1] - m[0][1] * m[1][0]
    # Laplace expansion along the first row.
    total = None
    for j in range(n):
        sub = [[row[c] for c in range(n) if c != j] for row in m[1:]]
        term = m[0][j] * _det(sub)
        if j % 2 == 1:
            term = -term
        total = term if total is None else total + term
    return total
