"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records primitive operations as they execute; ``backward`` replays
the record once in reverse to accumulate vector-Jacobian products. There is no
global state: the tape travels with the tensors, so independent tapes can be
evaluated concurrently.

All primitive functions accept either ``Tensor`` arguments (recorded) or plain
numpy arrays / scalars (treated as constants, computed eagerly). A call with
no ``Tensor`` argument returns a plain ``numpy.ndarray``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when an optimization or solve produces non-finite numbers."""


def _asarray(x):
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Ordered record of primitives. Node ids are indices into ``_nodes``;
    inputs of a node always precede it, so creation order is topological."""

    __slots__ = ("_nodes", "_leaves")

    def __init__(self):
        self._nodes = []
        self._leaves = {}

    def __len__(self):
        return len(self._nodes)

    def leaf(self, values) -> "Tensor":
        """Register an input tensor whose gradient should be retrievable."""
        values = _asarray(values)
        nid = self._push("leaf", (), None)
        self._leaves[nid] = values.shape
        return Tensor(values, self, nid)

    def _push(self, op, parents, vjp) -> int:
        self._nodes.append(_Node(op, parents, vjp))
        return len(self._nodes) - 1

    @property
    def leaf_ids(self):
        return tuple(self._leaves)

    def op_names(self):
        return [n.op for n in self._nodes]


class _Node:
    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op, parents, vjp):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """Dense float64 array bound to a node on a tape.

    ``values`` is the concrete array; ``node`` identifies the producing
    operation on ``tape``. Tensors from different tapes must not be mixed.
    """

    __slots__ = ("values", "tape", "node")

    def __init__(self, values, tape, node):
        self.values = values
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, node={self.node})"

    # operator sugar; all dispatch through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Tensor):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _values(x):
    return x.values if isinstance(x, Tensor) else _asarray(x)


def _parent(x):
    return x.node if isinstance(x, Tensor) else None


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _emit(op, out_values, args, vjp):
    tape = _tape_of(*args)
    if tape is None:
        return out_values
    parents = tuple(_parent(a) for a in args)
    nid = tape._push(op, parents, vjp)
    return Tensor(out_values, tape, nid)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _binary(op, a, b, f, vjp_maker):
    av, bv = _values(a), _values(b)
    try:
        out = f(av, bv)
    except ValueError as exc:
        raise ValueError(f"{op}: incompatible shapes {av.shape} and {bv.shape}") from exc
    return _emit(op, out, (a, b), vjp_maker(av, bv, out))


def add(a, b):
    return _binary("add", a, b, np.add,
                   lambda av, bv, out: lambda g: (_unbroadcast(g, av.shape),
                                                  _unbroadcast(g, bv.shape)))


def sub(a, b):
    return _binary("sub", a, b, np.subtract,
                   lambda av, bv, out: lambda g: (_unbroadcast(g, av.shape),
                                                  _unbroadcast(-g, bv.shape)))


def mul(a, b):
    return _binary("mul", a, b, np.multiply,
                   lambda av, bv, out: lambda g: (_unbroadcast(g * bv, av.shape),
                                                  _unbroadcast(g * av, bv.shape)))


def div(a, b):
    return _binary("div", a, b, np.divide,
                   lambda av, bv, out: lambda g: (_unbroadcast(g / bv, av.shape),
                                                  _unbroadcast(-g * av / (bv * bv), bv.shape)))


def matmul(a, b):
    av, bv = _values(a), _values(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree, {av.shape} vs {bv.shape}")
    out = av @ bv
    need_a, need_b = isinstance(a, Tensor), isinstance(b, Tensor)

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if need_b else None
        return ga, gb

    return _emit("matmul", out, (a, b), vjp)


def neg(a):
    av = _values(a)
    return _emit("neg", -av, (a,), lambda g: (-g,))


def power(a, p):
    p = float(p)
    av = _values(a)
    out = av ** p
    return _emit("power", out, (a,), lambda g: (g * p * av ** (p - 1.0),))


def square(a):
    av = _values(a)
    return _emit("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a):
    av = _values(a)
    out = np.sqrt(av)
    return _emit("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def exp(a):
    av = _values(a)
    out = np.exp(av)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def absolute(a):
    av = _values(a)
    # subgradient 0 at the kink
    return _emit("absolute", np.abs(av), (a,), lambda g: (g * np.sign(av),))


def sigmoid(a):
    av = _values(a)
    out = 1.0 / (1.0 + np.exp(-av))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    av = _values(a)
    sig = 1.0 / (1.0 + np.exp(-av))
    out = av * sig
    return _emit("silu", out, (a,), lambda g: (g * sig * (1.0 + av * (1.0 - sig)),))


def relu(a):
    av = _values(a)
    mask = av > 0.0
    return _emit("relu", av * mask, (a,), lambda g: (g * mask,))


def tensor_sum(a, axis=None, keepdims=False):
    av = _values(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _emit("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = _values(a)
    out = av.mean(axis=axis, keepdims=keepdims)
    count = av.size if axis is None else av.shape[axis]

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape) / count,)

    return _emit("mean", out, (a,), vjp)


def softmax(a):
    """Softmax over the last axis."""
    av = _values(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _emit("softmax", out, (a,), vjp)


def gather(a, idx, axis=0):
    """Select rows (or slices) by integer index along ``axis``."""
    av = _values(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take(av, idx, axis=axis)

    def vjp(g):
        ga = np.zeros_like(av)
        np.add.at(ga, _index_tuple(av.ndim, axis, idx), g)
        return (ga,)

    return _emit("gather", out, (a,), vjp)


def scatter_add(a, idx, size, axis=0):
    """Accumulate slices of ``a`` into a zero array of length ``size`` along ``axis``."""
    av = _values(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[0] != av.shape[axis]:
        raise ValueError(f"scatter_add: index length {idx.shape[0]} does not match "
                         f"input extent {av.shape[axis]} along axis {axis}")
    out_shape = list(av.shape)
    out_shape[axis] = int(size)
    out = np.zeros(out_shape, dtype=np.float64)
    np.add.at(out, _index_tuple(av.ndim, axis, idx), av)

    def vjp(g):
        return (np.take(g, idx, axis=axis),)

    return _emit("scatter_add", out, (a,), vjp)


def _index_tuple(ndim, axis, idx):
    sl = [slice(None)] * ndim
    sl[axis] = idx
    return tuple(sl)


def layer_norm_op(x, gamma, beta, eps=1e-6):
    """Fused layer normalization over the last axis (scale + shift)."""
    xv, gv, bv = _values(x), _values(gamma), _values(beta)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gv + bv

    def vjp(g):
        n = xv.shape[-1]
        gg = g * gv
        dx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        return dx, dgamma, dbeta

    return _emit("layer_norm", out, (x, gamma, beta), vjp)


def norm2(a):
    """Euclidean norm of the flattened input (scalar output)."""
    av = _values(a)
    out = np.sqrt((av * av).sum())

    def vjp(g):
        denom = out if out > 0.0 else 1.0
        return (g * av / denom,)

    return _emit("norm2", np.asarray(out), (a,), vjp)


def reshape(a, shape):
    av = _values(a)
    out = av.reshape(shape)
    return _emit("reshape", out, (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None):
    av = _values(a)
    out = np.transpose(av, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _emit("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def concat(parts, axis=-1):
    vals = [_values(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", out, tuple(parts), vjp)


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "neg": neg,
    "power": power,
    "square": square,
    "sqrt": sqrt,
    "exp": exp,
    "absolute": absolute,
    "sigmoid": sigmoid,
    "silu": silu,
    "relu": relu,
    "sum": tensor_sum,
    "mean": mean,
    "softmax": softmax,
    "layer_norm": layer_norm_op,
    "gather": gather,
    "scatter_add": scatter_add,
    "norm2": norm2,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
}


def primitive_names():
    return sorted(_PRIMITIVES)


def record(op, *inputs, **kwargs):
    """Apply the named primitive, recording it on the inputs' tape."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(tape: Tape, out: Tensor) -> dict:
    """Gradients of a scalar ``out`` with respect to every leaf of ``tape``.

    Returns a map node-id -> gradient array. Leaves that ``out`` does not
    depend on get explicit zeros. Fan-out accumulates additively.
    """
    if not isinstance(out, Tensor) or out.tape is not tape:
        raise ValueError("backward: output does not belong to this tape")
    if out.values.size != 1:
        raise ValueError(f"backward: output must be scalar, got shape {out.values.shape}")

    grads = {out.node: np.ones_like(out.values)}
    for nid in range(out.node, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = tape._nodes[nid]
        if node.op == "leaf":
            grads[nid] = g  # keep leaf grads
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pid is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg

    result = {}
    for lid, shape in tape._leaves.items():
        if lid in grads:
            result[lid] = np.asarray(grads[lid], dtype=np.float64).reshape(shape)
        else:
            result[lid] = np.zeros(shape)
    return result


def grad_for(gradmap, leaf: Tensor):
    """Gradient array for ``leaf`` from a ``backward`` result."""
    return gradmap[leaf.node]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam state for one parameter array."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray, lr=None) -> np.ndarray:
    """One in-place Adam update; returns ``param``.

    Rejects non-finite gradients, reporting the flat index of the first bad
    entry so training aborts point to the offending parameter.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape:
        raise ValueError(f"adam_step: grad shape {grad.shape} does not match param {param.shape}")
    bad = ~np.isfinite(grad)
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise DivergenceError(f"adam_step: non-finite gradient at flat index {idx}")
    if state.m is None:
        state.m = np.zeros_like(param)
        state.v = np.zeros_like(param)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    step_lr = state.lr if lr is None else lr
    param -= step_lr * mhat / (np.sqrt(vhat) + state.eps)
    return param
