"""A small reverse-mode differentiation tape over numpy arrays.

Only the primitives the model needs are provided. Each primitive computes its
forward value eagerly and records a vector-Jacobian product closure; calling
:meth:`Tape.backward` replays those closures in reverse creation order.

    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    loss = total(x * x)
    tape.backward(loss)
    x.grad  # array([2., 4.])
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import _kernels, gauss


class Node:
    __slots__ = ("value", "grad", "tape", "parents", "vjp")

    def __init__(self, value, tape: "Tape", parents=(), vjp=None):
        self.value = value
        self.grad = None
        self.tape = tape
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(np.asarray(self.value).reshape(()))

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Node) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a Node is not supported")
        return mul(self, 1.0 / other)

    def __repr__(self):
        return f"Node(shape={np.shape(self.value)})"


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), self)
        self.nodes.append(node)
        return node

    def emit(self, value, parents: Sequence[Node], vjp: Callable) -> Node:
        node = Node(value, self, tuple(parents), vjp)
        self.nodes.append(node)
        return node

    def backward(self, root: Node) -> None:
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if np.size(root.value) != 1:
            raise ValueError(f"backward needs a scalar root, got shape {np.shape(root.value)}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in self.nodes:
            if node.vjp is None and node.grad is None:
                node.grad = np.zeros_like(node.value)

    def release(self) -> None:
        """Drop recorded closures and intermediates; nodes keep value and grad.

        Nodes and the tape reference each other, so without this the memory
        of a step waits for the cycle collector.
        """
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
            node.tape = None
        self.nodes = []


def _tape_of(*items) -> Tape:
    for item in items:
        if isinstance(item, Node):
            return item.tape
    raise TypeError("at least one argument must be a Node")


def lift(value, tape: Tape | None = None) -> Node:
    """Wrap a plain array as a constant leaf (on a fresh tape if none given)."""
    if isinstance(value, Node):
        return value
    return (tape or Tape()).leaf(value)


def lift_all(*values) -> list[Node]:
    """Lift values onto the tape of the first Node among them (or a fresh one)."""
    tape = next((v.tape for v in values if isinstance(v, Node)), None) or Tape()
    return [lift(v, tape) for v in values]


# --------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    if isinstance(a, Node) and isinstance(b, Node):
        if a.shape != b.shape:
            raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return tape.emit(a.value + b.value, (a, b), lambda g: (g, g))
    node, const = (a, b) if isinstance(a, Node) else (b, a)
    value = node.value + const
    if value.shape != node.shape:
        raise ValueError("add: a constant may broadcast onto the node but not enlarge it")
    return tape.emit(value, (node,), lambda g: (g,))


def neg(a: Node) -> Node:
    return a.tape.emit(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    if isinstance(a, Node) and isinstance(b, Node):
        if a.shape != b.shape:
            raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
        av, bv = a.value, b.value
        return tape.emit(av * bv, (a, b), lambda g: (g * bv, g * av))
    node, const = (a, b) if isinstance(a, Node) else (b, a)
    return tape.emit(node.value * const, (node,), lambda g: (g * const,))


def total(a: Node) -> Node:
    shape = a.shape
    return a.tape.emit(np.sum(a.value), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Node) -> Node:
    n = a.value.size
    return total(a) * (1.0 / n)


def sum_squares(a: Node) -> Node:
    av = a.value
    return a.tape.emit(np.sum(av * av), (a,), lambda g: (2.0 * float(g) * av,))


def average(nodes: Sequence[Node]) -> Node:
    """Arithmetic mean of equally shaped nodes."""
    tape = nodes[0].tape
    w = 1.0 / len(nodes)
    value = sum(n.value for n in nodes) * w
    return tape.emit(value, tuple(nodes), lambda g: tuple(g * w for _ in nodes))


def sigmoid(a: Node) -> Node:
    s = gauss.sigmoid(a.value)
    return a.tape.emit(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a: Node) -> Node:
    """log(1 + exp(a)), computed without overflow."""
    x = a.value
    value = np.logaddexp(0.0, x)
    return a.tape.emit(value, (a,), lambda g: (g * gauss.sigmoid(x),))


def clip_min(a: Node, floor: float) -> Node:
    keep = a.value > floor
    return a.tape.emit(np.where(keep, a.value, floor), (a,), lambda g: (g * keep,))


def logsumexp_rows(a: Node) -> Node:
    x = a.value
    top = x.max(axis=1, keepdims=True)
    ex = np.exp(x - top)
    s = ex.sum(axis=1, keepdims=True)
    value = (top + np.log(s))[:, 0]
    soft = ex / s
    return a.tape.emit(value, (a,), lambda g: (g[:, None] * soft,))


def diagonal(a: Node) -> Node:
    n = a.shape[0]
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return a.tape.emit(np.diagonal(a.value).copy(), (a,), vjp)


def take(a: Node, index) -> Node:
    """Gather along axis 0; the adjoint scatter-adds repeated indices."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        if len(shape) == 1:
            return (np.bincount(index, weights=g, minlength=shape[0]),)
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return a.tape.emit(a.value[index], (a,), vjp)


def take_elements(a: Node, rows, cols) -> Node:
    """a[rows[k], cols[k]] for a 2-D node."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return a.tape.emit(a.value[rows, cols], (a,), vjp)


# --------------------------------------------------------------------------
# Gaussian distances


def _rowwise(fn, partials, mean_a, var_a, mean_b, var_b) -> Node:
    args = lift_all(mean_a, var_a, mean_b, var_b)
    vals = [x.value for x in args]
    value = fn(*vals)

    def vjp(g):
        live = value > 0  # clamp at zero blocks gradient
        gg = (g * live)[..., None]
        return tuple(gg * p for p in partials(*vals))

    return args[0].tape.emit(value, args, vjp)


def w2_rows(mean_a, var_a, mean_b, var_b) -> Node:
    return _rowwise(gauss.w2_squared_rows, gauss.w2_rows_partials, mean_a, var_a, mean_b, var_b)


def jeffreys_rows(mean_a, var_a, mean_b, var_b) -> Node:
    return _rowwise(gauss.jeffreys_rows, gauss.jeffreys_rows_partials,
                    mean_a, var_a, mean_b, var_b)


def _pairwise(fn, vjp_fn, mean_a, var_a, mean_b, var_b) -> Node:
    args = lift_all(mean_a, var_a, mean_b, var_b)
    vals = [x.value for x in args]
    value = fn(*vals)
    return args[0].tape.emit(value, args, lambda g: vjp_fn(g * (value > 0), *vals))


def w2_pairwise(mean_a, var_a, mean_b, var_b) -> Node:
    return _pairwise(gauss.w2_squared_pairwise, gauss.w2_pairwise_vjp,
                     mean_a, var_a, mean_b, var_b)


def jeffreys_pairwise(mean_a, var_a, mean_b, var_b) -> Node:
    return _pairwise(gauss.jeffreys_pairwise, gauss.jeffreys_pairwise_vjp,
                     mean_a, var_a, mean_b, var_b)


def edge_w2(mean: Node, var: Node, src, dst) -> Node:
    """W2 between table rows src[e] and dst[e], without materialising the gathers."""
    std = np.sqrt(var.value)
    m = mean.value
    value = _kernels.edge_w2(m, std, src, dst)

    def vjp(g):
        grad_mean = np.zeros_like(m)
        grad_var = np.zeros_like(std)
        _kernels.edge_w2_backward(g * (value > 0), m, std, src, dst, grad_mean, grad_var)
        return grad_mean, grad_var

    return mean.tape.emit(value, (mean, var), vjp)


# --------------------------------------------------------------------------
# sparse rows


def segment_softmax(logits: Node, indptr) -> Node:
    """Softmax within each CSR row segment (max-subtracted)."""
    alpha = _kernels.segment_softmax(logits.value, indptr)
    return logits.tape.emit(
        alpha, (logits,), lambda g: (_kernels.segment_softmax_backward(g, alpha, indptr),)
    )


def sparse_matmul(weights, x: Node, indptr, indices, transpose_perm, passthrough=None) -> Node:
    """out = A @ x for a square CSR matrix with a symmetric sparsity pattern.

    ``weights`` may be a Node (differentiated) or a constant array. Rows listed
    in ``passthrough`` have no stored entries and copy their input row instead.
    ``transpose_perm`` maps entry (r, c) to the position of entry (c, r).
    """
    w = weights.value if isinstance(weights, Node) else np.asarray(weights)
    xv = x.value
    out = _kernels.csr_matmul(indptr, indices, w, xv)
    if passthrough is not None and len(passthrough):
        out[passthrough] = xv[passthrough]

    def vjp(g):
        gx = _kernels.csr_matmul(indptr, indices, w[transpose_perm], g)
        if passthrough is not None and len(passthrough):
            gx[passthrough] += g[passthrough]
        if isinstance(weights, Node):
            return gx, _kernels.csr_sampled_dot(indptr, indices, g, xv)
        return (gx,)

    parents = (x, weights) if isinstance(weights, Node) else (x,)
    return x.tape.emit(out, parents, vjp)


# --------------------------------------------------------------------------
# finite differences


def finite_diff_check(loss_fn, params: dict, step: float = 1e-5, samples: int = 200,
                      seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return ``(loss, grads)`` where ``grads`` has the same
    keys and shapes as ``params``. ``samples`` coordinates are drawn uniformly
    over all parameter entries. The relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8). NaN anywhere yields ``inf``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, grads = loss_fn(params)
    keys = sorted(params)
    sizes = np.array([params[k].size for k in keys])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    flat = rng.choice(offsets[-1], size=min(samples, offsets[-1]), replace=False)

    worst = 0.0
    for pos in flat:
        slot = int(np.searchsorted(offsets, pos, side="right") - 1)
        key = keys[slot]
        arr = params[key].reshape(-1)
        j = pos - offsets[slot]
        orig = arr[j]
        arr[j] = orig + step
        up = float(loss_fn(params)[0])
        arr[j] = orig - step
        down = float(loss_fn(params)[0])
        arr[j] = orig
        numeric = (up - down) / (2.0 * step)
        analytic = float(np.asarray(grads[key]).reshape(-1)[j])
        if not (math.isfinite(numeric) and math.isfinite(analytic)):
            return math.inf
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
