"""Reverse-mode automatic differentiation on small dense numpy tensors.

A dynamic tape: every operation on :class:`Var` records its inputs and a
vector-Jacobian product closure. ``backward`` walks the tape in reverse
topological order and accumulates gradients for registered parameters.
Also hosts the Adam optimizer with exponential learning-rate decay and
the binary parameter checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_DEFAULT_DTYPE = np.float64

CHECKPOINT_MAGIC = b"SPARFCK1"


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new constants (float64 default, float32 for fast runs)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    """Operands of an op have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' and '.join(map(str, shapes))}")


class NonFiniteGradient(RuntimeError):
    """A parameter received a NaN/inf gradient."""


class Var:
    """A node of the computation graph holding an ndarray value."""

    __slots__ = ("value", "_parents", "requires_grad")

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value, dtype=_DEFAULT_DTYPE)
        self._parents = parents
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)

    @property
    def shape(self):
        return self.value.shape

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Param(Var):
    """A named, trainable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def constant(x) -> Var:
    return Var(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes that numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Var, b: Var) -> None:
    try:
        np.broadcast_shapes(a.value.shape, b.value.shape)
    except ValueError:
        raise ShapeError(op, a.value.shape, b.value.shape) from None


# -- primitives ---------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast("add", a, b)
    return Var(
        a.value + b.value,
        parents=(
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast("sub", a, b)
    return Var(
        a.value - b.value,
        parents=(
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ),
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast("mul", a, b)
    return Var(
        a.value * b.value,
        parents=(
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ),
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast("div", a, b)
    inv = 1.0 / b.value
    out = a.value * inv
    return Var(
        out,
        parents=(
            (a, lambda g: _unbroadcast(g * inv, a.value.shape)),
            (b, lambda g: _unbroadcast(-g * out * inv, b.value.shape)),
        ),
    )


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0 if bv.ndim == 1 else -2]:
        raise ShapeError("matmul", av.shape, bv.shape)
    out = av @ bv

    def grad_a(g):
        if bv.ndim == 1:
            return np.outer(g, bv) if av.ndim == 2 else g * bv
        ga = g @ bv.T
        return ga

    def grad_b(g):
        if av.ndim == 1:
            return np.outer(av, g) if bv.ndim == 2 else g * av
        return av.T @ g

    return Var(out, parents=((a, grad_a), (b, grad_b)))


def vsum(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape).copy()

    return Var(a.value.sum(axis=axis, keepdims=keepdims), parents=((a, vjp),))


def vmean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def sin(a) -> Var:
    a = as_var(a)
    return Var(np.sin(a.value), parents=((a, lambda g: g * np.cos(a.value)),))


def cos(a) -> Var:
    a = as_var(a)
    return Var(np.cos(a.value), parents=((a, lambda g: -g * np.sin(a.value)),))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return Var(out, parents=((a, lambda g: g * out),))


def log(a) -> Var:
    a = as_var(a)
    return Var(np.log(a.value), parents=((a, lambda g: g / a.value),))


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)
    return Var(out, parents=((a, lambda g: g * (0.5 / out)),))


def square(a) -> Var:
    a = as_var(a)
    return Var(a.value**2, parents=((a, lambda g: g * (2.0 * a.value)),))


def absval(a) -> Var:
    a = as_var(a)
    return Var(np.abs(a.value), parents=((a, lambda g: g * np.sign(a.value)),))


def _expit(x: np.ndarray) -> np.ndarray:
    # overflow-free logistic: exp only sees non-positive arguments
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> Var:
    a = as_var(a)
    out = _expit(np.asarray(a.value))
    return Var(out, parents=((a, lambda g: g * out * (1.0 - out)),))


def softplus(a) -> Var:
    a = as_var(a)
    out = np.logaddexp(0.0, a.value)
    sig = _expit(np.asarray(a.value))
    return Var(out, parents=((a, lambda g: g * sig),))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return Var(np.where(mask, a.value, 0.0), parents=((a, lambda g: g * mask),))


def dense(x, w, b, activation: str = "none") -> Var:
    """Fused `x @ w + b` with an optional ReLU: one graph node per layer
    instead of three, which matters for the per-op overhead of small MLPs."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError("dense", xv.shape, wv.shape)
    pre = xv @ wv + b.value
    if activation == "relu":
        mask = pre > 0
        out = np.where(mask, pre, 0.0)
    elif activation == "none":
        mask = None
        out = pre
    else:
        raise ValueError(f"unknown dense activation {activation!r}")

    def gate(g):
        return g * mask if mask is not None else g

    return Var(out, parents=(
        (x, lambda g: gate(g) @ wv.T),
        (w, lambda g: xv.T @ gate(g)),
        (b, lambda g: gate(g).sum(axis=0)),
    ))


def norm(a, axis=-1, keepdims=False, eps: float = 1e-30) -> Var:
    """L2 norm along an axis; eps keeps the gradient finite at the origin."""
    a = as_var(a)
    n = np.sqrt(np.sum(a.value**2, axis=axis, keepdims=True) + eps)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * a.value / n

    return Var(n if keepdims else np.squeeze(n, axis=axis), parents=((a, vjp),))


def huber(a, delta: float = 1.0) -> Var:
    """Elementwise Huber penalty: quadratic within delta, linear outside."""
    a = as_var(a)
    absx = np.abs(a.value)
    out = np.where(absx <= delta, 0.5 * a.value**2, delta * (absx - 0.5 * delta))
    return Var(out, parents=((a, lambda g: g * np.clip(a.value, -delta, delta)),))


def stop_gradient(a) -> Var:
    a = as_var(a)
    return Var(a.value)


def concat(parts, axis=0) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        sl = [slice(None)] * parts[k].value.ndim
        sl[axis] = slice(offsets[k], offsets[k + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Var(
        np.concatenate([p.value for p in parts], axis=axis),
        parents=tuple((p, make_vjp(k)) for k, p in enumerate(parts)),
    )


def stack(parts, axis=0) -> Var:
    parts = [as_var(p) for p in parts]

    def make_vjp(k):
        return lambda g: np.take(g, k, axis=axis)

    return Var(
        np.stack([p.value for p in parts], axis=axis),
        parents=tuple((p, make_vjp(k)) for k, p in enumerate(parts)),
    )


def take(a, idx) -> Var:
    a = as_var(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return Var(a.value[idx], parents=((a, vjp),))


def reshape(a, shape) -> Var:
    a = as_var(a)
    return Var(a.value.reshape(shape), parents=((a, lambda g: g.reshape(a.value.shape)),))


def transpose(a, axes=None) -> Var:
    a = as_var(a)
    inv = None if axes is None else np.argsort(axes)
    return Var(
        np.transpose(a.value, axes),
        parents=((a, lambda g: np.transpose(g, inv)),),
    )


def cumsum(a, axis=-1) -> Var:
    a = as_var(a)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return Var(np.cumsum(a.value, axis=axis), parents=((a, vjp),))


def dot(a, b) -> Var:
    return vsum(mul(a, b))


def cross3(a, b) -> Var:
    """Cross product of two 3-vectors, built from slices."""
    a, b = as_var(a), as_var(b)
    return stack(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


# -- backward pass ------------------------------------------------------


def _toposort(root: Var):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Var, params=None) -> dict:
    """Gradients of a scalar loss node for every parameter.

    Returns a dict keyed by Param; parameters the loss does not reach get
    zero gradients. Accumulation order is fixed by the tape, so results
    are deterministic for a given graph.
    """
    if loss.value.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {loss.value.shape}")
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in node._parents:
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = np.asarray(pg, dtype=parent.value.dtype).reshape(
                    parent.value.shape
                )
            else:
                acc += pg
        if isinstance(node, Param):
            grads[id(node)] = g
    if params is None:
        return {}
    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = np.zeros_like(p.value) if g is None else g
    return out


# -- Adam with exponential learning-rate decay --------------------------


@dataclass
class AdamState:
    lr_initial: float
    lr_final: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def learning_rate(self, step=None) -> float:
        k = self.step if step is None else step
        frac = min(k / self.total_steps, 1.0)
        return self.lr_initial * (self.lr_final / self.lr_initial) ** frac

    def reset_moments(self) -> None:
        self.m.clear()
        self.v.clear()


def adam_step(params, grads: dict, state: AdamState, lr_scale: float = 1.0) -> None:
    """One Adam update (in place) with bias correction and decayed lr."""
    lr = state.learning_rate() * lr_scale
    state.step += 1
    t = state.step
    for p in params:
        g = grads[p]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter '{p.name}'")
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.value)
            state.m[p.name] = m
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1**t)
        vhat = v / (1.0 - state.beta2**t)
        p.value = p.value - lr * mhat / (np.sqrt(vhat) + state.eps)


# -- checkpoint I/O -----------------------------------------------------


def save_checkpoint(params: dict, path) -> None:
    """Write named arrays as little-endian binary with the SPARFCK1 magic."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(params)))
        for name, arr in params.items():
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", f.read(4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode()
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims)
            out[name] = np.array(data, dtype=_DEFAULT_DTYPE)
        return out
