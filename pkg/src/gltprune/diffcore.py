"""Small reverse-mode autodiff core.

Only the handful of primitives the two/three layer GCN, the mask
normalization and the Wasserstein head need. Values are float64 numpy
arrays; every op appends one node to the tape it was created on, so the
tape is topologically ordered by construction and ``backward`` is a single
reverse sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

VjpFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive ops plus the named parameters."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _push(self, value, parents=(), vjp=None, name=None) -> "Node":
        node = Node(value, self, len(self.nodes), tuple(parents), vjp, name)
        self.nodes.append(node)
        return node

    def const(self, value) -> "Node":
        return self._push(np.asarray(value, dtype=np.float64))

    def param(self, value, name: str) -> "Node":
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        node = self._push(np.array(value, dtype=np.float64), name=name)
        self.params[name] = node
        return node

    def record(self, value, parents: Sequence["Node"], vjp: VjpFn) -> "Node":
        """Append a custom op. ``vjp(g)`` returns one cotangent per parent."""
        return self._push(np.asarray(value, dtype=np.float64), parents, vjp)

    def __len__(self):
        return len(self.nodes)


class Node:
    __slots__ = ("value", "tape", "index", "parents", "vjp", "name")

    def __init__(self, value, tape, index, parents, vjp, name):
        self.value = value
        self.tape = tape
        self.index = index
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(self.tape, other)))

    def __rsub__(self, other):
        return add(_lift(self.tape, other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return dense_matmul(self, other)

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("nodes belong to different tapes")
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one argument must be a Node")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return tape.record(
        a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def neg(a: Node) -> Node:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape.record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def power(a: Node, p: float) -> Node:
    av = a.value
    return a.tape.record(av**p, (a,), lambda g: (g * p * av ** (p - 1),))


def log_floor(a: Node, floor: float = 1e-12) -> Node:
    """log(max(a, floor)); zero gradient where the floor is active."""
    av = a.value
    live = av > floor
    safe = np.where(live, av, 1.0)
    return a.tape.record(
        np.log(np.maximum(av, floor)), (a,), lambda g: (np.where(live, g / safe, 0.0),)
    )


def relu(x: Node) -> Node:
    on = x.value > 0
    return x.tape.record(np.where(on, x.value, 0.0), (x,), lambda g: (g * on,))


def row_softmax(x: Node) -> Node:
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return x.tape.record(s, (x,), vjp)


# ---------------------------------------------------------------- reductions / indexing


def total(x: Node) -> Node:
    shape = x.shape
    return x.tape.record(np.array(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def take_rows(x: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return x.tape.record(x.value[idx], (x,), vjp)


def gather(x: Node, idx) -> Node:
    """1-D gather ``x[idx]``; duplicates in ``idx`` accumulate on the way back."""
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[0]
    return x.tape.record(
        x.value[idx], (x,), lambda g: (np.bincount(idx, weights=g, minlength=n).astype(np.float64),)
    )


def scatter_add(x: Node, idx, size: int) -> Node:
    """1-D ``out[idx[k]] += x[k]`` into a length ``size`` vector."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.bincount(idx, weights=x.value, minlength=size).astype(np.float64)
    return x.tape.record(out, (x,), lambda g: (g[idx],))


def pick(x: Node, rows, cols) -> Node:
    """Entries ``x[rows[k], cols[k]]`` as a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return x.tape.record(x.value[rows, cols], (x,), vjp)


# ---------------------------------------------------------------- products


def dense_matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {av.shape} x {bv.shape}")
    return tape.record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


@dataclass(frozen=True)
class SparsePattern:
    """CSR layout of a symmetric adjacency with self-loops.

    Slots are sorted by (row, col) so the numerical result of a product
    does not depend on the order edges were listed in.
    """

    n: int
    rows: np.ndarray  # edge endpoint i (i < j)
    cols: np.ndarray  # edge endpoint j
    indptr: np.ndarray
    indices: np.ndarray
    slot_row: np.ndarray
    source: np.ndarray  # slot -> position in concat(values, values, self_loops)
    fwd_slot: np.ndarray = field(repr=False)  # edge -> slot of (i, j)
    bwd_slot: np.ndarray = field(repr=False)  # edge -> slot of (j, i)
    self_slot: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, n: int, rows, cols) -> "SparsePattern":
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        e = len(rows)
        if e and (np.any(rows == cols) or rows.min() < 0 or max(rows.max(), cols.max()) >= n):
            raise ValueError("edges must be off-diagonal and within [0, n)")
        r = np.concatenate([rows, cols, np.arange(n)])
        c = np.concatenate([cols, rows, np.arange(n)])
        order = np.lexsort((c, r))
        r_sorted, c_sorted = r[order], c[order]
        if len(r_sorted) > 1:
            dup = (np.diff(r_sorted) == 0) & (np.diff(c_sorted) == 0)
            if dup.any():
                raise ValueError("duplicate edges in adjacency")
        indptr = np.zeros(n + 1, dtype=np.intp)
        np.cumsum(np.bincount(r_sorted, minlength=n), out=indptr[1:])
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        return cls(
            n=n,
            rows=rows,
            cols=cols,
            indptr=indptr,
            indices=c_sorted.astype(np.intp),
            slot_row=r_sorted.astype(np.intp),
            source=order,
            fwd_slot=inverse[:e],
            bwd_slot=inverse[e : 2 * e],
            self_slot=inverse[2 * e :],
        )

    def matrix(self, values: np.ndarray, self_loops: np.ndarray) -> sp.csr_matrix:
        data = np.concatenate([values, values, self_loops])[self.source]
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))


@dataclass
class EdgeValuedAdjacency:
    """Symmetric adjacency whose per-edge and self-loop values are tape nodes."""

    pattern: SparsePattern
    values: Node
    self_loop_values: Node

    @property
    def n(self) -> int:
        return self.pattern.n

    @property
    def edges(self) -> np.ndarray:
        return np.stack([self.pattern.rows, self.pattern.cols], axis=1)

    def to_dense(self) -> np.ndarray:
        return self.pattern.matrix(self.values.value, self.self_loop_values.value).toarray()


def masked_spmm(adj: EdgeValuedAdjacency, h) -> Node:
    """``Â @ h`` with gradients to the edge values, self-loop values and ``h``."""
    tape = adj.values.tape
    h = _lift(tape, h)
    pat = adj.pattern
    if h.value.ndim != 2 or h.shape[0] != pat.n:
        raise ValueError(f"spmm dimension mismatch: n={pat.n}, h={h.shape}")
    a = pat.matrix(adj.values.value, adj.self_loop_values.value)
    hv = h.value

    def vjp(g):
        slot = np.einsum("sk,sk->s", g[pat.slot_row], hv[pat.indices])
        return (slot[pat.fwd_slot] + slot[pat.bwd_slot], slot[pat.self_slot], a.T @ g)

    return tape.record(a @ hv, (adj.values, adj.self_loop_values, h), vjp)


# ---------------------------------------------------------------- gradients


def backward(tape: Tape, loss: Node, wrt: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns gradients by parameter name.

    Parameters that do not influence the loss get a zero array.
    """
    if loss.tape is not tape:
        raise ValueError("loss node was not recorded on this tape")
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    names = list(tape.params) if wrt is None else list(wrt)
    for name in names:
        if name not in tape.params:
            raise KeyError(f"parameter {name!r} is not on the tape")

    grads: list[np.ndarray | None] = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            j = parent.index
            grads[j] = pg if grads[j] is None else grads[j] + pg

    out = {}
    for name in names:
        node = tape.params[name]
        g = grads[node.index] if node.index <= loss.index else None
        out[name] = np.zeros_like(node.value) if g is None else np.array(g, dtype=np.float64)
    return out


def hvp_cross(
    grad_at: Callable[[np.ndarray], dict[str, np.ndarray]],
    base: np.ndarray,
    direction: np.ndarray,
    base_grads: dict[str, np.ndarray] | None = None,
    rel_step: float = 1e-3,
) -> dict[str, np.ndarray]:
    """Mixed second derivative ``(d/dx grad_p L) @ direction`` by forward difference.

    ``grad_at(x)`` returns the gradient of the loss w.r.t. the other
    parameters ``p`` with ``x`` substituted. By symmetry of mixed partials
    this equals ``(d^2 L / dp dx) @ direction``, the term the implicit
    gradient needs, without a per-coordinate loop over ``p``.

    Raises FloatingPointError if the result is not finite.
    """
    base = np.asarray(base, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    scale = np.max(np.abs(direction)) if direction.size else 0.0
    if base_grads is None:
        base_grads = grad_at(base)
    if scale == 0.0:
        return {k: np.zeros_like(v) for k, v in base_grads.items()}
    step = rel_step * (1.0 + np.max(np.abs(base), initial=0.0)) / scale
    moved = grad_at(base + step * direction)
    out = {k: (moved[k] - base_grads[k]) / step for k in base_grads}
    for k, v in out.items():
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"non-finite cross HVP for {k!r}")
    return out
