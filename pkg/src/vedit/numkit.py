"""Small dense tensor library with tape-based reverse-mode differentiation.

Tensors wrap a numpy array (float32 by default, float64 allowed for
finite-difference checks).  Every op that touches a tensor with
``requires_grad`` records its parents and a backward closure; calling
:func:`backward` on a scalar walks that graph once and then frees it.

Random numbers come from :class:`Rng`, a fixed generator that does not
depend on numpy's own bit generators:

* seeding: SplitMix64 expands the 64-bit seed into ``LANES`` xoshiro256**
  states (4 words per lane, drawn in order from one SplitMix64 stream);
* stream: each refill advances all lanes once and emits their outputs in
  lane order, so the u64 stream is step-major / lane-minor;
* uniforms: ``((u >> 11) + 0.5) * 2**-53``, strictly inside (0, 1);
* normals: Box-Muller on consecutive uniform pairs ``(u1, u2)``, emitting
  ``r*cos(2 pi u2)`` then ``r*sin(2 pi u2)`` with ``r = sqrt(-2 ln u1)``,
  computed in float64 and rounded to float32.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Rng", "Tensor", "AdamState", "ShapeError", "NonFiniteError", "GraphError",
    "randn", "tensor", "zeros", "ones", "channel_concat", "channel_slice",
    "concat", "transpose", "mse", "backward", "adam_step", "debug_mode", "splitmix64",
]

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
LANES = 64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# random numbers


def splitmix64(x: int) -> int:
    """One SplitMix64 output for state ``x`` (the state is pre-incremented)."""
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


class Rng:
    """Deterministic xoshiro256** generator with ``LANES`` interleaved lanes."""

    def __init__(self, seed: int):
        seed = int(seed) & MASK64
        words = []
        x = seed
        for _ in range(4 * LANES):
            words.append(splitmix64(x))
            x = (x + GOLDEN_GAMMA) & MASK64
        s = np.array(words, dtype=np.uint64).reshape(LANES, 4).T.copy()
        # an all-zero xoshiro state never leaves zero
        dead = ~(s.any(axis=0))
        s[0, dead] = np.uint64(1)
        self._s = s
        self._buf = np.empty(0, dtype=np.uint64)

    def _advance(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        with np.errstate(over="ignore"):
            out = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        self._s[3] = _rotl(s3, 45)
        return out

    def next_u64(self, n: int) -> np.ndarray:
        if n <= len(self._buf):
            out, self._buf = self._buf[:n], self._buf[n:]
            return out
        need = n - len(self._buf)
        blocks = [self._buf] + [self._advance() for _ in range(-(-need // LANES))]
        allv = np.concatenate(blocks)
        out, self._buf = allv[:n], allv[n:]
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 draws strictly inside (0, 1)."""
        u = self.next_u64(n) >> np.uint64(11)
        return (u.astype(np.float64) + 0.5) * (2.0 ** -53)

    def random(self) -> float:
        return float(self.uniform(1)[0])

    def uniform_range(self, low: float, high: float) -> float:
        return low + (high - low) * self.random()

    def integers(self, high: int, n: int | None = None):
        """Integers in ``[0, high)`` via ``floor(u * high)``."""
        if high < 1:
            raise ValueError("high must be >= 1")
        if n is None:
            return min(int(self.random() * high), high - 1)
        v = np.floor(self.uniform(n) * high).astype(np.int64)
        return np.minimum(v, high - 1)

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        shape = _check_shape(shape)
        n = int(np.prod(shape))
        m = -(-n // 2)
        u = self.uniform(2 * m)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = 2.0 * math.pi * u[1::2]
        z = np.empty(2 * m, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].astype(np.float32).reshape(shape)


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"invalid shape {list(shape)}: need at least one dim, all >= 1")
    return shape


# ---------------------------------------------------------------------------
# debug screening

_DEBUG = contextvars.ContextVar("vedit_numkit_debug", default=os.environ.get("VEDIT_DEBUG", "") not in ("", "0"))


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Screen every op output for NaN/Inf while active."""
    token = _DEBUG.set(enabled)
    try:
        yield
    finally:
        _DEBUG.reset(token)


def _screen(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {what}")


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """Dense array with optional gradient tracking.

    ``grad`` accumulates across :func:`backward` calls until reset with
    :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.array(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _result(cls, arr: np.ndarray, parents: tuple["Tensor", ...], back: Callable, op: str) -> "Tensor":
        out = object.__new__(cls)
        out.data = arr
        out.grad = None
        out._op = op
        out._consumed = False
        track = any(p.requires_grad or p._backward is not None for p in parents)
        out.requires_grad = False
        out._parents = parents if track else ()
        out._backward = back if track else None
        if _DEBUG.get():
            _screen(arr, op)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        t = object.__new__(Tensor)
        t.data, t.requires_grad, t.grad = self.data, False, None
        t._parents, t._backward, t._op, t._consumed = (), None, "leaf", False
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self, axis: int | None = None, keepdims: bool = False):
        if axis is None:
            return tmean(self)
        return mean_axis(self, axis, keepdims)


def _raise_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {list(shape)}")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=like.dtype), like.shape), dtype=like.dtype)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype), dtype=dtype)


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(_check_shape(shape), dtype=dtype), dtype=dtype)


def randn(shape: Sequence[int], seed: int) -> Tensor:
    """Standard-normal float32 tensor, bit-identical for equal ``(shape, seed)``."""
    return Tensor(Rng(seed).normal(shape))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, k: float) -> Tensor:
    k = a.dtype.type(k)
    return Tensor._result(a.data * k, (a,), lambda g: (g * k,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} @ {list(b.shape)}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def add_row(a: Tensor, bias: Tensor) -> Tensor:
    """``a (n, m) + bias (m,)`` broadcast over rows."""
    if a.data.ndim != 2 or bias.shape != (a.shape[1],):
        raise ShapeError(f"add_row: {list(a.shape)} + {list(bias.shape)}")
    return Tensor._result(a.data + bias.data, (a, bias), lambda g: (g, g.sum(axis=0)), "add_row")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add_row(matmul(x, w), b)


def silu(a: Tensor) -> Tensor:
    x = a.data
    # tanh form avoids exp overflow for large |x|
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    out = x * sig

    def back(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return Tensor._result(out.astype(x.dtype, copy=False), (a,), back, "silu")


def tsum(a: Tensor) -> Tensor:
    shp = a.shape
    return Tensor._result(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                          lambda g: (np.broadcast_to(g, shp).astype(a.dtype),), "sum")


def tmean(a: Tensor) -> Tensor:
    shp, n = a.shape, a.size
    return Tensor._result(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                          lambda g: (np.broadcast_to(g / n, shp).astype(a.dtype),), "mean")


def mean_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    shp = a.shape
    n = shp[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shp).astype(a.dtype),)

    return Tensor._result(out, (a,), back, "mean_axis")


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Repeat a size-1 ``axis`` ``n`` times."""
    if a.shape[axis] != 1:
        raise ShapeError(f"expand: axis {axis} has size {a.shape[axis]}, need 1")
    shp = list(a.shape)
    shp[axis] = n
    out = np.broadcast_to(a.data, shp).copy()
    return Tensor._result(out, (a,), lambda g: (g.sum(axis=axis, keepdims=True),), "expand")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(tuple(shape))
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                          lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if len(t.shape) != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {list(ref)} and {list(t.shape)} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def back(g):
        idx = [slice(None)] * nd
        grads = []
        for i in range(len(tensors)):
            idx[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return Tensor._result(out, tuple(tensors), back, "concat")


def take(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    nd = a.data.ndim
    ax = axis % nd
    idx = [slice(None)] * nd
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shp = a.shape
    out = a.data[idx].copy()

    def back(g):
        full = np.zeros(shp, dtype=a.dtype)
        full[idx] = g
        return (full,)

    return Tensor._result(out, (a,), back, "take")


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate ``(..., F, C1, H, W)`` and ``(..., F, C2, H, W)`` along channels."""
    if a.data.ndim < 4 or a.data.ndim != b.data.ndim:
        raise ShapeError(f"channel_concat needs matching rank >= 4, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[:-3] + a.shape[-2:] != b.shape[:-3] + b.shape[-2:]:
        raise ShapeError(f"channel_concat: frame/spatial dims differ: {list(a.shape)} vs {list(b.shape)}")
    return concat([a, b], axis=-3)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    return take(x, -3, start, stop)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences (scalar tensor)."""
    _same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=a.dtype)

    def back(g):
        ga = (2.0 / n) * g * diff
        return (ga.astype(a.dtype), (-ga).astype(b.dtype))

    return Tensor._result(out, (a, b), back, "mse")


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    The graph is released afterwards; a second call on the same loss raises
    :class:`GraphError`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if loss._consumed:
        raise GraphError("graph already consumed by a previous backward()")
    if loss._backward is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
            return
        raise GraphError("loss was not produced by a recorded computation")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("loss is not finite")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (p.requires_grad or p._backward is not None):
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg

    for node in order:
        if node._backward is not None:
            node._parents, node._backward, node._consumed = (), None, True


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0

    @classmethod
    def for_params(cls, params: Iterable[Tensor]) -> "AdamState":
        params = list(params)
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None] | None, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update.  ``grads=None`` reads ``p.grad``.

    A missing gradient counts as zero.
    """
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ShapeError("adam state does not match parameter list")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape or state.first_moment[i].shape != p.shape:
            raise ShapeError(f"adam: parameter {i} shape {list(p.shape)} vs grad {list(g.shape)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam: non-finite gradient for parameter {i} (shape {list(p.shape)})")

    state.step_count += 1
    t = state.step_count
    dt = params[0].dtype.type if params else np.float32
    c1 = dt(1.0 - beta1 ** t)
    c2 = dt(1.0 - beta2 ** t)
    b1, b2, lr_, eps_ = dt(beta1), dt(beta2), dt(lr), dt(eps)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.first_moment[i]
        v = state.second_moment[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data = p.data - lr_ * (m / c1) / (np.sqrt(v / c2) + eps_)
