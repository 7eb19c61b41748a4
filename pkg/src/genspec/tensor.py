"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps a float64 ndarray together with an optional gradient and a
closure that propagates output gradients to its parents. backward() runs a
topological sort from the loss and accumulates gradients with +=, so shared
subexpressions (diamond graphs) sum their contributions.

The op set is deliberately small and fixed: elementwise arithmetic, matmul,
conv2d, shape ops, the usual activations, softmax, layernorm, reductions,
gather/embed lookups, concat, slicing, and stop_gradient. Everything else in
the package is composed from these.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .errors import ShapeError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (thread-local)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array node in a reverse-mode autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "meta")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.meta: dict | None = None  # op-specific provenance (e.g. vq tokens)

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def _tracked(self) -> bool:
        return self.requires_grad or self._parents != ()

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled() and any(p._tracked() for p in parents):
            out._parents = parents
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into .grad for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:  # iterative DFS; graphs get deep during long rollouts
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if not node.requires_grad and node._parents != ():
                node.grad = None  # free interior grads once propagated

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- arithmetic ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        if a._tracked():
            a._accum(_unbroadcast(g, a.shape))
        if b._tracked():
            b._accum(_unbroadcast(g, b.shape))

    return Tensor._make(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        if a._tracked():
            a._accum(_unbroadcast(g, a.shape))
        if b._tracked():
            b._accum(_unbroadcast(-g, b.shape))

    return Tensor._make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        if a._tracked():
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b._tracked():
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    out_data = a.data @ b.data

    def backward(g):
        if a._tracked():
            ga = g @ b.data.swapaxes(-1, -2)
            a._accum(_unbroadcast(ga, a.shape))
        if b._tracked():
            gb = a.data.swapaxes(-1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape))

    return Tensor._make(out_data, (a, b), backward)


# -- convolution ----------------------------------------------------------------

_conv_index_cache: dict[tuple, np.ndarray] = {}


def _conv_indices(C: int, H: int, W: int, kh: int, kw: int, stride: int, pad: int):
    """Flat gather indices into the padded input, shape (C*kh*kw, OH*OW)."""
    key = (C, H, W, kh, kw, stride, pad)
    hit = _conv_index_cache.get(key)
    if hit is not None:
        return hit
    Hp, Wp = H + 2 * pad, W + 2 * pad
    OH = (Hp - kh) // stride + 1
    OW = (Wp - kw) // stride + 1
    c = np.repeat(np.arange(C), kh * kw)  # (C*kh*kw,)
    i = np.tile(np.repeat(np.arange(kh), kw), C)
    j = np.tile(np.arange(kw), C * kh)
    oh = np.repeat(np.arange(OH) * stride, OW)  # (OH*OW,)
    ow = np.tile(np.arange(OW) * stride, OH)
    rows = i[:, None] + oh[None, :]
    cols = j[:, None] + ow[None, :]
    flat = c[:, None] * (Hp * Wp) + rows * Wp + cols
    _conv_index_cache[key] = flat
    return flat


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation. x: (B, C, H, W), w: (O, C, kh, kw) -> (B, O, OH, OW)."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4-D input and kernel, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel channels {w.shape}")
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape} (pad={pad})")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    OH = (Hp - kh) // stride + 1
    OW = (Wp - kw) // stride + 1
    idx = _conv_indices(C, H, W, kh, kw, stride, pad)
    if pad:
        xp = np.zeros((B, C, Hp, Wp))
        xp[:, :, pad:-pad, pad:-pad] = x.data
    else:
        xp = x.data
    L = OH * OW
    CKK = C * kh * kw
    # one big GEMM over (CKK, B*L) beats B small ones on CPU
    cols = np.ascontiguousarray(xp.reshape(B, -1)[:, idx].transpose(1, 0, 2).reshape(CKK, B * L))
    wmat = w.data.reshape(O, -1)
    out_data = np.ascontiguousarray(
        (wmat @ cols).reshape(O, B, L).transpose(1, 0, 2)
    ).reshape(B, O, OH, OW)

    def backward(g):
        gmat = np.ascontiguousarray(g.reshape(B, O, L).transpose(1, 0, 2)).reshape(O, B * L)
        if w._tracked():
            w._accum((gmat @ cols.T).reshape(w.shape))
        if x._tracked():
            gcols = (wmat.T @ gmat).reshape(CKK, B, L).transpose(1, 0, 2)  # (B, CKK, L)
            P = C * Hp * Wp
            flat_idx = (np.arange(B)[:, None, None] * P + idx[None, :, :]).ravel()
            gx = np.bincount(flat_idx, weights=gcols.ravel(), minlength=B * P).reshape(B, C, Hp, Wp)
            if pad:
                gx = gx[:, :, pad:-pad, pad:-pad]
            x._accum(gx)

    return Tensor._make(out_data, (x, w), backward)


# -- shape ops -------------------------------------------------------------------


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _wrap(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation for shape {x.shape}")
    out_data = x.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        if x._tracked():
            x._accum(g.transpose(inverse))

    return Tensor._make(out_data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = _wrap(x)
    shape = tuple(shape)
    try:
        out_data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}") from None

    def backward(g):
        if x._tracked():
            x._accum(g.reshape(x.shape))

    return Tensor._make(out_data, (x,), backward)


def slice_(x: Tensor, key) -> Tensor:
    """Basic slicing (slices / ints / per-axis tuples); gradient scatters back."""
    x = _wrap(x)
    out_data = x.data[key]

    def backward(g):
        if x._tracked():
            gx = np.zeros_like(x.data)
            gx[key] = g
            x._accum(gx)

    return Tensor._make(np.ascontiguousarray(out_data), (x,), backward)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(
            i != (axis % len(base)) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat: shapes {parts[0].shape} and {p.shape} differ off axis {axis}")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for p, piece in zip(parts, pieces):
            if p._tracked():
                p._accum(piece)

    return Tensor._make(out_data, tuple(parts), backward)


# -- activations / pointwise ------------------------------------------------------

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    keep = x.data > 0  # subgradient 0 at the kink
    out_data = np.where(keep, x.data, 0.0)

    def backward(g):
        if x._tracked():
            x._accum(g * keep)

    return Tensor._make(out_data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the Gaussian CDF."""
    x = _wrap(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out_data = x.data * cdf

    def backward(g):
        if x._tracked():
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
            x._accum(g * (cdf + x.data * pdf))

    return Tensor._make(out_data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    out_data = np.where(
        x.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x.data))),
        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))),
    )

    def backward(g):
        if x._tracked():
            x._accum(g * out_data * (1.0 - out_data))

    return Tensor._make(out_data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    out_data = np.exp(x.data)

    def backward(g):
        if x._tracked():
            x._accum(g * out_data)

    return Tensor._make(out_data, (x,), backward)


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    if np.any(x.data <= 0):
        raise ShapeError(f"log: input must be positive, min value {x.data.min()!r}")
    out_data = np.log(x.data)

    def backward(g):
        if x._tracked():
            x._accum(g / x.data)

    return Tensor._make(out_data, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x._tracked():
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            x._accum(out_data * (g - dot))

    return Tensor._make(out_data, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(
            f"layernorm: scale/shift must have shape ({D},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        if beta._tracked():
            beta._accum(g.reshape(-1, D).sum(axis=0))
        if gamma._tracked():
            gamma._accum((g * xhat).reshape(-1, D).sum(axis=0))
        if x._tracked():
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accum(inv * (gx - m1 - xhat * m2))

    return Tensor._make(out_data, (x, gamma, beta), backward)


# -- reductions --------------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if x._tracked():
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(gg, axis)
            x._accum(np.broadcast_to(gg, x.shape).copy() if np.ndim(gg) else np.full(x.shape, gg))

    return Tensor._make(out_data, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def backward(g):
        if x._tracked():
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(gg, axis)
            spread = np.broadcast_to(gg, x.shape) if np.ndim(gg) else np.full(x.shape, gg)
            x._accum(spread / count)

    return Tensor._make(out_data, (x,), backward)


# -- lookups -----------------------------------------------------------------------


def gather(x: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """Pick elements along `axis`; index has the same shape as x off that axis."""
    x = _wrap(x)
    index = np.asarray(index, dtype=np.int64)
    hi = x.shape[axis]
    if index.size and (index.min() < 0 or index.max() >= hi):
        raise ShapeError(f"gather: index out of range for axis size {hi}, got [{index.min()}, {index.max()}]")
    out_data = np.take_along_axis(x.data, index, axis=axis)

    def backward(g):
        if x._tracked():
            # scatter-add on a contiguous (..., hi) buffer, then move the axis back
            gxt = np.zeros(np.moveaxis(x.data, axis, -1).shape)
            idt = np.moveaxis(index, axis, -1)
            gt = np.moveaxis(g, axis, -1)
            rows = np.arange(int(np.prod(idt.shape[:-1], dtype=np.int64)))[:, None]
            np.add.at(
                gxt.reshape(-1, hi),
                (rows, idt.reshape(len(rows), -1)),
                gt.reshape(len(rows), -1),
            )
            x._accum(np.moveaxis(gxt, -1, axis))

    return Tensor._make(out_data, (x,), backward)


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table (K, D), ids any integer shape -> (*ids.shape, D)."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    K = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= K):
        raise ShapeError(f"embed: id out of range for table with {K} rows, got [{ids.min()}, {ids.max()}]")
    out_data = table.data[ids]

    def backward(g):
        if table._tracked():
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table._accum(gt)

    return Tensor._make(out_data, (table,), backward)


# -- gradient control ----------------------------------------------------------------


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass; blocks all gradient flow in the backward pass."""
    x = _wrap(x)
    return Tensor(x.data)


# -- generic dispatcher ----------------------------------------------------------------

_OPS = {
    "add": lambda ins, at: add(*ins),
    "sub": lambda ins, at: sub(*ins),
    "mul": lambda ins, at: mul(*ins),
    "matmul": lambda ins, at: matmul(*ins),
    "conv2d": lambda ins, at: conv2d(*ins, stride=at.get("stride", 1), pad=at.get("pad", 0)),
    "transpose": lambda ins, at: transpose(ins[0], at.get("axes")),
    "reshape": lambda ins, at: reshape(ins[0], at["shape"]),
    "relu": lambda ins, at: relu(ins[0]),
    "gelu": lambda ins, at: gelu(ins[0]),
    "sigmoid": lambda ins, at: sigmoid(ins[0]),
    "exp": lambda ins, at: exp(ins[0]),
    "log": lambda ins, at: log(ins[0]),
    "softmax": lambda ins, at: softmax(ins[0], at.get("axis", -1)),
    "layernorm": lambda ins, at: layernorm(*ins, eps=at.get("eps", 1e-5)),
    "sum": lambda ins, at: sum_(ins[0], at.get("axis"), at.get("keepdims", False)),
    "mean": lambda ins, at: mean(ins[0], at.get("axis"), at.get("keepdims", False)),
    "gather": lambda ins, at: gather(ins[0], at["index"], at.get("axis", -1)),
    "embed": lambda ins, at: embed(ins[0], at["ids"]),
    "concat": lambda ins, at: concat(list(ins), at.get("axis", 0)),
    "slice": lambda ins, at: slice_(ins[0], at["key"]),
    "stop_gradient": lambda ins, at: stop_gradient(ins[0]),
}


def apply(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Uniform entry point: apply('mul', [a, b]) == mul(a, b)."""
    if kind not in _OPS:
        raise KeyError(f"unknown op kind {kind!r}; valid kinds: {sorted(_OPS)}")
    return _OPS[kind](list(inputs), attrs or {})


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def finite_diff_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d f(x) / d x for scalar-valued f.

    Perturbs one element at a time, so cost is 2 * x.size evaluations. Meant
    as the reference oracle for backward(), not for production gradients.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_grad: h must be positive, got {h}")
    base = np.array(x.data, dtype=np.float64)
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    with no_grad():
        for i in range(base.size):
            probe = base.copy().reshape(-1)
            probe[i] = base.reshape(-1)[i] + h
            hi = f(Tensor(probe.reshape(base.shape)))
            probe[i] = base.reshape(-1)[i] - h
            lo = f(Tensor(probe.reshape(base.shape)))
            flat[i] = (float(hi.data) - float(lo.data)) / (2.0 * h)
    return out
