"""Dense float64 tensors with a reverse-mode tape.

A :class:`Tape` is an append-only list of nodes. Every op whose inputs live on
a tape records a node holding its input ids and a vector-Jacobian closure;
inputs therefore always precede outputs and the list is already in
topological order. Tensors that do not belong to a tape are constants: ops on
them compute values without recording anything, which is how evaluation and
finite-difference probes run.

Example::

    tape = Tape()
    x = tape.watch(np.array([[0.5]]))
    loss = mean_all(tanh(x))
    grads = backward(loss)
    grads[x]          # array([[0.78644773]])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from tempo.errors import ContractError, NumericsError, ShapeError

LAYER_NORM_EPS = 1e-5
# Finite stand-in for -inf; exp(-1e30 - max) underflows to exactly 0.0.
MASK_FILL = -1e30


class Tensor:
    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, dtype=np.float64):
        arr = np.array(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor data contains NaN or Inf")
        if arr.dtype != np.float64:
            # 32-bit is a storage format only
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.tape = None
        self.node_id = None

    @classmethod
    def _wrap(cls, arr, tape=None, node_id=None):
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.tape = tape
        t.node_id = node_id
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        where = f", node={self.node_id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass(frozen=True)
class Node:
    kind: str
    inputs: tuple
    vjp: Callable | None
    shape: tuple


class Gradients:
    """Leaf gradients produced by :meth:`Tape.backward`, keyed by node id."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, leaf):
        nid = leaf.node_id if isinstance(leaf, Tensor) else leaf
        if isinstance(leaf, Tensor) and leaf.tape is not self._tape:
            raise ContractError("tensor does not belong to this tape")
        g = self._grads.get(nid)
        if g is None:
            g = np.zeros(self._tape.nodes[nid].shape)
        return g

    def __contains__(self, nid):
        return nid in self._grads

    def items(self):
        return self._grads.items()


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[int] = []
        self.gradients: Gradients | None = None

    def __len__(self):
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf and return its tensor."""
        src = value.data if isinstance(value, Tensor) else value
        t = Tensor(src)
        t.tape = self
        t.node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, t.shape))
        self.leaves.append(t.node_id)
        return t

    def record(self, kind, inputs, out, vjp) -> Tensor:
        ids = tuple(x.node_id if x.tape is self else None for x in inputs)
        nid = len(self.nodes)
        self.nodes.append(Node(kind, ids, vjp, out.shape))
        return Tensor._wrap(out, self, nid)

    def backward(self, loss: Tensor) -> Gradients:
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ContractError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending = {loss.node_id: np.ones(loss.shape)}
        leaf_grads = {}
        for nid in range(loss.node_id, -1, -1):
            g = pending.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.vjp is None:
                leaf_grads[nid] = g
                continue
            for src, gi in zip(node.inputs, node.vjp(g)):
                if src is None or gi is None:
                    continue
                if src in pending:
                    pending[src] = pending[src] + gi
                else:
                    pending[src] = gi
        for nid in self.leaves:
            if nid not in leaf_grads:
                leaf_grads[nid] = np.zeros(self.nodes[nid].shape)
        self.gradients = Gradients(self, leaf_grads)
        return self.gradients


def backward(loss: Tensor) -> Gradients:
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise ContractError("loss is not attached to a tape")
    return loss.tape.backward(loss)


# --- op plumbing -----------------------------------------------------------


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs):
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("inputs are recorded on different tapes")
            tape = x.tape
    return tape


def _emit(kind, inputs, out, make_vjp):
    out = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericsError(f"{kind} produced a non-finite value")
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor._wrap(out)
    return tape.record(kind, inputs, out, make_vjp())


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- ops -------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None
    out = np.matmul(a.data, b.data)

    def make_vjp():
        ad, bd = a.data, b.data

        def vjp(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb

        return vjp

    return _emit("matmul", (a, b), out, make_vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def make_vjp():
        sa, sb = a.shape, b.shape
        return lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return _emit("add", (a, b), out, make_vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def make_vjp():
        ad, bd = a.data, b.data
        return lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _emit("mul", (a, b), out, make_vjp)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda: (lambda g: (g * (1.0 - out * out),)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda: (lambda g: (g * out,)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0
    out = np.where(keep, x.data, 0.0)
    return _emit("relu", (x,), out, lambda: (lambda g: (g * keep,)))


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def make_vjp():
        def vjp(g):
            return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

        return vjp

    return _emit("softmax_lastdim", (x,), out, make_vjp)


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean())
    shape, n = x.shape, x.data.size
    return _emit("mean_all", (x,), out, lambda: (lambda g: (np.full(shape, float(g) / n),)))


def layer_norm(x, gamma=None, beta=None, eps=LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    d = x.shape[-1]
    affine = []
    for p in (gamma, beta):
        if p is not None:
            p = as_tensor(p)
            if p.shape != (d,):
                raise ShapeError(f"layer_norm: affine shape {p.shape} does not match width {d}")
        affine.append(p)
    gamma, beta = affine
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)

    def make_vjp():
        gd = gamma.data if gamma is not None else None
        lead = tuple(range(x.ndim - 1))

        def vjp(g):
            gxhat = g * gd if gd is not None else g
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
            res = [gx]
            if gamma is not None:
                res.append((g * xhat).sum(axis=lead))
            if beta is not None:
                res.append(g.sum(axis=lead))
            return tuple(res)

        return vjp

    return _emit("layer_norm", inputs, out, make_vjp)


def concat_rows(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ContractError("concat_rows needs at least one tensor")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat_rows: shapes {ref} and {x.shape} do not conform")
    out = np.concatenate([x.data for x in xs], axis=ax)

    def make_vjp():
        cuts = np.cumsum([x.shape[ax] for x in xs])[:-1]
        return lambda g: tuple(np.split(g, cuts, axis=ax))

    return _emit("concat_rows", tuple(xs), out, make_vjp)


def slice_rows(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[0]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for shape {x.shape}")
    out = x.data[start:stop].copy()

    def make_vjp():
        shape = x.shape

        def vjp(g):
            full = np.zeros(shape)
            full[start:stop] = g
            return (full,)

        return vjp

    return _emit("slice_rows", (x,), out, make_vjp)


def masked_fill(x, mask, value: float = MASK_FILL) -> Tensor:
    """Replace entries of ``x`` where ``mask`` is 0 with ``value``.

    ``mask`` is a constant 0/1 array that broadcasts to ``x``; 1 keeps the entry.
    """
    x = as_tensor(x)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    try:
        if np.broadcast_shapes(x.shape, m.shape) != x.shape:
            raise ValueError
    except ValueError:
        raise ShapeError(f"masked_fill: mask shape {m.shape} does not match {x.shape}") from None
    keep = m != 0
    out = np.where(keep, x.data, value)
    return _emit("masked_fill", (x,), out, lambda: (lambda g: (g * keep,)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape).copy()
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    src = x.shape
    return _emit("reshape", (x,), out, lambda: (lambda g: (g.reshape(src),)))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2) if x.ndim >= 2 else (0,)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), out, lambda: (lambda g: (np.transpose(g, inv),)))


OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "exp": exp,
    "relu": relu,
    "softmax_lastdim": softmax_lastdim,
    "mean_all": mean_all,
    "layer_norm": layer_norm,
    "concat_rows": lambda *xs, **kw: concat_rows(xs, **kw),
    "slice_rows": slice_rows,
    "masked_fill": masked_fill,
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def finite_diff_check(f, x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a Tensor to a scalar Tensor. It is called once on a watched
    leaf for the analytic gradient and then on untaped constants for the
    probes. Non-finite values count as an infinite error.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"step h={h} outside [1e-7, 1e-3]")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    leaf = tape.watch(x0)
    try:
        out = f(leaf)
        if out.tape is None:
            analytic = np.zeros_like(x0)
        else:
            analytic = backward(out)[leaf]
    except NumericsError:
        return float("inf")

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    probe = x0.copy()
    pflat = probe.reshape(-1)
    for i in range(x0.size):
        orig = pflat[i]
        try:
            pflat[i] = orig + h
            fp = float(f(Tensor(probe)).data)
            pflat[i] = orig - h
            fm = float(f(Tensor(probe)).data)
        except NumericsError:
            return float("inf")
        finally:
            pflat[i] = orig
        flat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    if not np.all(np.isfinite(err)):
        return float("inf")
    return float(err.max()) if err.size else 0.0
