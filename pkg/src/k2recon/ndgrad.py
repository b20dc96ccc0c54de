"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records operations while it is active (it is a context manager);
``Tape.backward`` runs a reverse topological sweep and returns a gradient map
for every leaf that requires gradients.  Everything is 64-bit and there is no
broadcasting: shapes must match exactly, with explicit ``reshape`` /
``tile_scalar`` ops where a shape change is wanted.

Complex data is carried as pairs of real tensors by the layers above; this
module knows nothing about complex numbers.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "param",
    "add",
    "sub",
    "mul",
    "div",
    "smul",
    "neg",
    "concat",
    "reshape",
    "channel",
    "tile_scalar",
    "leaky_relu",
    "softplus",
    "reduce",
    "conv2d",
    "custom_op",
]


class Tensor:
    """Dense float64 array with an optional gradient requirement.

    Tensors are treated as immutable once an op has consumed them; parameter
    updates mutate ``.data`` in place only between tapes.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small operator sugar; every op also exists as a module function.
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return smul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def param(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.data.shape, float(x)))


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple, backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_tapes = _TapeStack()


def _active_tape() -> Optional["Tape"]:
    return _tapes.stack[-1] if _tapes.stack else None


class Tape:
    """Ordered record of operations; creation order is topological order.

    One tape per training sample; independent tapes may live on different
    threads (the active-tape stack is thread-local).
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tapes.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tapes.stack.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor, retain_all: bool = False) -> dict:
        """Reverse sweep from a scalar loss.

        Returns a map keyed by Tensor; leaves that require gradients always
        get an entry of identical shape, leaves that do not are absent.  With
        ``retain_all`` intermediate gradients are kept too (useful in tests).
        """
        if loss.data.size != 1:
            raise ContractViolation(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        produced = {id(n.out) for n in self._nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        refs: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    refs[key] = p
            if not retain_all and id(node.out) in produced:
                # Gradient of an intermediate has been fully consumed.
                del grads[id(node.out)]
        out = {}
        for key, g in grads.items():
            t = refs[key]
            if retain_all or t.requires_grad:
                out[t] = g
        return out


def _record(out: Tensor, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._nodes.append(_Node(out, tuple(parents), backward))
    return out


def _check_same_shape(opname: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape:
        raise ContractViolation(
            f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}"
        )


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def backward(g):
        return (g if a.requires_grad else None, -g if b.requires_grad else None)

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return _record(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    out = Tensor(a.data / b.data, requires_grad=a.requires_grad or b.requires_grad)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g / bd if a.requires_grad else None
        gb = -g * ad / (bd * bd) if b.requires_grad else None
        return (ga, gb)

    return _record(out, (a, b), backward)


def smul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c, requires_grad=a.requires_grad)

    def backward(g):
        return (g * c,)

    return _record(out, (a,), backward)


def neg(a: Tensor) -> Tensor:
    return smul(a, -1.0)


# ---------------------------------------------------------------------------
# shape ops


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Flatten each input and concatenate into one 1-D tensor."""
    if not tensors:
        raise ContractViolation("concat: empty input list")
    parts = [t.data.reshape(-1) for t in tensors]
    out = Tensor(
        np.concatenate(parts),
        requires_grad=any(t.requires_grad for t in tensors),
    )
    sizes = [p.size for p in parts]
    shapes = [t.data.shape for t in tensors]

    def backward(g):
        grads = []
        off = 0
        for t, n, shp in zip(tensors, sizes, shapes):
            grads.append(g[off : off + n].reshape(shp) if t.requires_grad else None)
            off += n
        return tuple(grads)

    return _record(out, tuple(tensors), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ContractViolation(
            f"reshape: cannot reshape {a.data.shape} ({a.data.size} elements) to {shape}"
        )
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad)
    orig = a.data.shape

    def backward(g):
        return (g.reshape(orig),)

    return _record(out, (a,), backward)


def channel(a: Tensor, i: int) -> Tensor:
    """Extract slice ``a[i]`` along the leading axis (shape drops one dim)."""
    if a.data.ndim < 1 or not (0 <= i < a.data.shape[0]):
        raise ContractViolation(
            f"channel: index {i} out of range for shape {a.data.shape}"
        )
    out = Tensor(a.data[i].copy(), requires_grad=a.requires_grad)
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return _record(out, (a,), backward)


def tile_scalar(a: Tensor, shape) -> Tensor:
    """Replicate a single-element tensor to an arbitrary shape."""
    if a.data.size != 1:
        raise ContractViolation(f"tile_scalar: input has shape {a.data.shape}, not scalar")
    shape = tuple(int(s) for s in shape)
    out = Tensor(np.full(shape, a.item()), requires_grad=a.requires_grad)
    orig = a.data.shape

    def backward(g):
        return (np.asarray(g.sum()).reshape(orig),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    slope = float(slope)
    if not (0.0 < slope < 1.0):
        raise ContractViolation(f"leaky_relu: slope must be in (0,1), got {slope}")
    factor = np.where(a.data >= 0, 1.0, slope)
    out = Tensor(a.data * factor, requires_grad=a.requires_grad)

    def backward(g):
        return (g * factor,)

    return _record(out, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out_data = np.logaddexp(0.0, ad)
    out = Tensor(out_data, requires_grad=a.requires_grad)

    def backward(g):
        return (g / (1.0 + np.exp(-ad)),)

    return _record(out, (a,), backward)


_REDUCE_KINDS = ("sum", "mean", "l2norm", "l1norm")


def reduce(a: Tensor, kind: str) -> Tensor:
    """Reduce to a scalar (shape ``()``): sum, mean, l2norm or l1norm."""
    if kind not in _REDUCE_KINDS:
        raise ContractViolation(f"reduce: unknown kind {kind!r}, expected one of {_REDUCE_KINDS}")
    ad = a.data
    if kind == "sum":
        val = ad.sum()
    elif kind == "mean":
        val = ad.mean()
    elif kind == "l2norm":
        val = np.sqrt((ad * ad).sum())
    else:
        val = np.abs(ad).sum()
    out = Tensor(np.asarray(val), requires_grad=a.requires_grad)

    def backward(g):
        gs = float(g)
        if kind == "sum":
            return (np.full(ad.shape, gs),)
        if kind == "mean":
            return (np.full(ad.shape, gs / ad.size),)
        if kind == "l2norm":
            # Subgradient choice: zero at the exact zero vector.
            if val == 0.0:
                return (np.zeros(ad.shape),)
            return (gs * ad / val,)
        return (gs * np.sign(ad),)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# 2-D convolution (same padding, stride 1)


def _pad2(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    c, h, w = x.shape
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw))
    xp[:, ph : ph + h, pw : pw + w] = x
    return xp


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[C,H,W] -> [C*kh*kw, H*W] patch matrix with zero same-padding.

    Built from kh*kw contiguous slice copies; the row order matches
    weight.reshape(O, C*kh*kw).
    """
    c, h, w = x.shape
    xp = _pad2(x, kh // 2, kw // 2)
    cols = np.empty((c, kh * kw, h, w))
    k = 0
    for i in range(kh):
        for j in range(kw):
            cols[:, k] = xp[:, i : i + h, j : j + w]
            k += 1
    return cols.reshape(c * kh * kw, h * w)


def _col2im(t: np.ndarray, c: int, h: int, w: int, kh: int, kw: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch rows back onto the image grid."""
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw))
    t = t.reshape(c, kh * kw, h, w)
    k = 0
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + h, j : j + w] += t[:, k]
            k += 1
    return xp[:, ph : ph + h, pw : pw + w]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Cross-correlation of [C,H,W] with [O,C,kh,kw] filters plus bias [O].

    Odd kernels only; zero padding keeps the spatial size, stride is 1.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4 or bias.data.ndim != 1:
        raise ContractViolation(
            f"conv2d: expected input [C,H,W], weight [O,C,kh,kw], bias [O]; got "
            f"{x.data.shape}, {weight.data.shape}, {bias.data.shape}"
        )
    c, h, w = x.data.shape
    o, cw, kh, kw = weight.data.shape
    if cw != c:
        raise ContractViolation(
            f"conv2d: channel mismatch, input has {c} channels but weight expects {cw}"
        )
    if bias.data.shape[0] != o:
        raise ContractViolation(
            f"conv2d: bias has {bias.data.shape[0]} entries for {o} filters"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractViolation(f"conv2d: kernel extents must be odd, got {kh}x{kw}")

    cols = _im2col(x.data, kh, kw)
    w2d = weight.data.reshape(o, c * kh * kw)
    out_data = (w2d @ cols).reshape(o, h, w) + bias.data[:, None, None]
    out = Tensor(
        out_data,
        requires_grad=x.requires_grad or weight.requires_grad or bias.requires_grad,
    )
    xd = x.data

    def backward(g):
        g2d = g.reshape(o, h * w)
        gx = gw = gb = None
        if bias.requires_grad:
            gb = g2d.sum(axis=1)
        if weight.requires_grad:
            # Recomputing the patch matrix beats caching it here: keeping
            # every layer's cols alive across the tape costs far more in
            # page traffic than one extra slice pass.
            gw = (g2d @ _im2col(xd, kh, kw).T).reshape(o, c, kh, kw)
        if x.requires_grad:
            gx = _col2im(w2d.T @ g2d, c, h, w, kh, kw)
        return (gx, gw, gb)

    return _record(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# custom-op extension point


def custom_op(
    name: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Record an externally computed op with a caller-supplied backward.

    ``backward`` receives the output gradient array and must return one
    gradient array (or None) per input, in order.  Used by the FFT pair and
    the data-consistency layer's implicit gradient.
    """
    out = Tensor(
        np.asarray(out_data, dtype=np.float64),
        requires_grad=any(t.requires_grad for t in inputs),
    )
    return _record(out, tuple(inputs), backward)
