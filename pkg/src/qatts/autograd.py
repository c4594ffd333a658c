"""Small reverse-mode autodiff engine on top of numpy.

Only the operations the forecasting transformer needs are provided. Every op
records a node ``(kind, inputs, ctx)`` and looks up its backward rule in a
registry keyed by ``kind``; custom ops (fake quantization) plug in through
:func:`register_gradient` instead of patching the graph.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ShapeError

GradFn = Callable[["Tensor", np.ndarray], Sequence["np.ndarray | None"]]

_GRADIENTS: dict[str, GradFn] = {}
_DTYPE = np.float32
_GRAD_ENABLED = True


def register_gradient(kind: str) -> Callable[[GradFn], GradFn]:
    """Register the backward rule for nodes of type ``kind``.

    The rule receives the output node and the upstream gradient and returns
    one gradient (or None) per input, in input order.
    """

    def deco(fn: GradFn) -> GradFn:
        _GRADIENTS[kind] = fn
        return fn

    return deco


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype of newly created tensors (float64 for gradient checks)."""
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "inputs", "ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self.ctx: dict = {}
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operators
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(kind: str, value: np.ndarray, inputs: Sequence[Tensor], ctx: dict | None = None) -> Tensor:
    """Wrap a forward result as a graph node; inputs without grads produce a constant."""
    out = Tensor(value)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        if kind not in _GRADIENTS:
            raise KeyError(f"no gradient registered for op {kind!r}")
        out.requires_grad = True
        out.op = kind
        out.inputs = tuple(inputs)
        out.ctx = ctx or {}
    return out


def _topological(root: Tensor) -> list[Tensor]:
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
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.inputs, _GRADIENTS[node.op](node, g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if pg.shape != parent.shape:
                pg = _unbroadcast(pg, parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply("add", a.data + b.data, (a, b))


@register_gradient("add")
def _add_grad(out, g):
    return g, g


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply("sub", a.data - b.data, (a, b))


@register_gradient("sub")
def _sub_grad(out, g):
    return g, -g


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply("mul", a.data * b.data, (a, b))


@register_gradient("mul")
def _mul_grad(out, g):
    a, b = out.inputs
    return g * b.data, g * a.data


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply("div", a.data / b.data, (a, b))


@register_gradient("div")
def _div_grad(out, g):
    a, b = out.inputs
    return g / b.data, -g * a.data / (b.data * b.data)


def relu(x: Tensor) -> Tensor:
    return apply("relu", np.maximum(x.data, 0), (x,))


@register_gradient("relu")
def _relu_grad(out, g):
    return (g * (out.inputs[0].data > 0),)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by a constant (no gradient flows there)."""
    mask = np.asarray(mask, dtype=bool)
    return apply("masked_fill", np.where(mask, np.asarray(value, x.data.dtype), x.data), (x,), {"mask": mask})


@register_gradient("masked_fill")
def _masked_fill_grad(out, g):
    return (np.where(out.ctx["mask"], 0, g),)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / np.asarray(1.0 - p, x.data.dtype)
    return mul(x, Tensor(keep))


# shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return apply("matmul", np.matmul(a.data, b.data), (a, b))


@register_gradient("matmul")
def _matmul_grad(out, g):
    a, b = out.inputs
    return np.matmul(g, np.swapaxes(b.data, -1, -2)), np.matmul(np.swapaxes(a.data, -1, -2), g)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    return apply("transpose", np.transpose(x.data, axes), (x,), {"axes": axes})


@register_gradient("transpose")
def _transpose_grad(out, g):
    return (np.transpose(g, np.argsort(out.ctx["axes"])),)


def reshape(x: Tensor, shape) -> Tensor:
    return apply("reshape", x.data.reshape(shape), (x,))


@register_gradient("reshape")
def _reshape_grad(out, g):
    return (g.reshape(out.inputs[0].shape),)


def getitem(x: Tensor, idx) -> Tensor:
    return apply("getitem", x.data[idx], (x,), {"idx": idx})


@register_gradient("getitem")
def _getitem_grad(out, g):
    x = out.inputs[0]
    full = np.zeros_like(x.data)
    idx = out.ctx["idx"]
    parts = idx if isinstance(idx, tuple) else (idx,)
    if all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts):
        full[idx] += g
    else:
        np.add.at(full, idx, g)
    return (full,)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    return apply("concat", np.concatenate([x.data for x in xs], axis=axis), xs, {"axis": axis, "sizes": sizes})


@register_gradient("concat")
def _concat_grad(out, g):
    cuts = np.cumsum(out.ctx["sizes"])[:-1]
    return tuple(np.split(g, cuts, axis=out.ctx["axis"]))


# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), {"axis": axis, "keepdims": keepdims})


@register_gradient("sum")
def _sum_grad(out, g):
    x = out.inputs[0]
    axis, keepdims = out.ctx["axis"], out.ctx["keepdims"]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape),)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


# composite ops with fused gradients


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return apply("softmax", y, (x,), {"axis": axis, "y": y})


@register_gradient("softmax")
def _softmax_grad(out, g):
    y, axis = out.ctx["y"], out.ctx["axis"]
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, x.data.dtype))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data
    return apply("layer_norm", y, (x, gamma, beta), {"xhat": xhat, "inv": inv})


@register_gradient("layer_norm")
def _layer_norm_grad(out, g):
    x, gamma, _ = out.inputs
    xhat, inv = out.ctx["xhat"], out.ctx["inv"]
    lead = tuple(range(g.ndim - 1))
    dgamma = (g * xhat).sum(axis=lead)
    dbeta = g.sum(axis=lead)
    gx = g * gamma.data
    dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    return apply("mse", np.asarray((diff * diff).mean(), pred.data.dtype), (pred, target), {"diff": diff})


@register_gradient("mse")
def _mse_grad(out, g):
    diff = out.ctx["diff"]
    d = g * 2.0 * diff / diff.size
    return d, -d


# optimizer


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: OptimizerState) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype)
