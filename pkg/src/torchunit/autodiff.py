"""Dense float64 tensors with a reverse-mode gradient tape.

Every op on a tensor that (transitively) depends on a ``grad_enabled`` leaf is
recorded on the active :class:`Tape`.  :func:`backward` replays that tape in
reverse, accumulates leaf gradients into ``Tensor.grad`` and frees the tape.
A tape can be replayed once; a fresh forward pass builds a fresh tape.

Example::

    x = Tensor([3.0], grad_enabled=True)
    loss = (x * x).sum()
    backward(loss)
    x.grad  # array([6.])
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import BroadcastError, ConfigError, ShapeError, TapeError

DTYPE = np.float64


class _Node:
    __slots__ = ("parents", "out", "backward_fn", "needs")

    def __init__(self, parents, out, backward_fn, needs):
        self.parents = parents
        self.out = out
        self.backward_fn = backward_fn
        self.needs = needs


class Tape:
    """Ordered record of executed ops; replayable exactly once."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that was already replayed")
        self.nodes.append(node)


class _State(threading.local):
    def __init__(self) -> None:
        self.stack: list[Tape] = []
        self.default = Tape()
        self.grad_mode = True


_state = _State()


def current_tape() -> Tape:
    if _state.stack:
        return _state.stack[-1]
    if _state.default.consumed:
        _state.default = Tape()
    return _state.default


@contextmanager
def recording(tape: Tape | None = None) -> Iterator[Tape]:
    """Record ops issued inside the block onto ``tape`` (a new one by default)."""
    tape = Tape() if tape is None else tape
    _state.stack.append(tape)
    try:
        yield tape
    finally:
        _state.stack.pop()


@contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.grad_mode
    _state.grad_mode = False
    try:
        yield
    finally:
        _state.grad_mode = prev


class Tensor:
    """An n-dimensional float64 array that can take part in the gradient tape."""

    __slots__ = ("values", "grad_enabled", "grad", "_tape")
    __array_ufunc__ = None

    def __init__(self, values, grad_enabled: bool = False):
        self.values = np.asarray(values, dtype=DTYPE)
        self.grad_enabled = bool(grad_enabled)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def requires_grad(self) -> bool:
        return self.grad_enabled or self._tape is not None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else _raise_item(self)

    def __repr__(self) -> str:
        flag = ", grad_enabled=True" if self.grad_enabled else ""
        return f"Tensor({self.values!r}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis="all", keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis="all", keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis="all", keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_item(t: Tensor) -> float:
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def parameter(values) -> Tensor:
    """A trainable leaf (owns a private copy of ``values``)."""
    return Tensor(np.array(values, dtype=DTYPE, copy=True), grad_enabled=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(values)
    if not _state.grad_mode:
        return out
    needs = tuple(p.requires_grad for p in parents)
    if not any(needs):
        return out
    tape = current_tape()
    for p in parents:
        if p._tape is not None and p._tape is not tape:
            raise TapeError("op mixes tensors recorded on different (or freed) tapes")
    tape.record(_Node(tuple(parents), out, backward_fn, needs))
    out._tape = tape
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every grad-enabled leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.values)
    if loss._tape is None:
        _accumulate_leaf(loss, seed)
        return
    tape = loss._tape
    if tape.consumed:
        raise TapeError("tape already replayed; run a new forward pass first")
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g, node.needs)
        for parent, need, pg in zip(node.parents, node.needs, parent_grads):
            if not need or pg is None:
                continue
            if parent._tape is None:
                _accumulate_leaf(parent, pg)
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    tape.nodes.clear()
    tape.consumed = True


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise BroadcastError(f"cannot broadcast shapes {a.shape} and {b.shape}") from exc


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _result(a.values + b.values, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _result(a.values - b.values, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)

    def bw(g, needs):
        return (
            _unbroadcast(g * b.values, a.shape) if needs[0] else None,
            _unbroadcast(g * a.values, b.shape) if needs[1] else None,
        )

    return _result(a.values * b.values, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.values / b.values

    def bw(g, needs):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = _unbroadcast(g / b.values, a.shape) if needs[0] else None
            gb = _unbroadcast(-g * out / b.values, b.shape) if needs[1] else None
        return ga, gb

    return _result(out, (a, b), bw)


def power(a, exponent: int) -> Tensor:
    """``a ** exponent`` for a non-negative integer exponent."""
    if not isinstance(exponent, (int, np.integer)) or exponent < 0:
        raise ValueError(f"exponent must be a non-negative int, got {exponent!r}")
    a = as_tensor(a)

    def bw(g, needs):
        return (g * exponent * a.values ** (exponent - 1) if exponent else np.zeros_like(g),)

    return _result(a.values**exponent, (a,), bw)


def _unary(a, forward: Callable, local_grad: Callable) -> Tensor:
    a = as_tensor(a)
    out = forward(a.values)

    def bw(g, needs):
        return (g * local_grad(a.values, out),)

    return _result(out, (a,), bw)


def neg(a) -> Tensor:
    return _unary(a, np.negative, lambda x, y: -1.0)


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    def fwd(x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x)

    return _unary(a, fwd, lambda x, y: 1.0 / x)


def cos(a) -> Tensor:
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def sin(a) -> Tensor:
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def sqrt(a) -> Tensor:
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(DTYPE))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    return _unary(a, _sigmoid, lambda x, y: y * (1.0 - y))


def softplus(a) -> Tensor:
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x))


def clip(a, lo: float, hi: float) -> Tensor:
    return _unary(
        a, lambda x: np.clip(x, lo, hi), lambda x, y: ((x >= lo) & (x <= hi)).astype(DTYPE)
    )


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {
    "exp": exp,
    "cos": cos,
    "sin": sin,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "neg": neg,
    "log": log,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; binary kinds broadcast on trailing dimensions."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ----------------------------------------------------------------------------
# linear algebra, reductions, shape plumbing


def matmul(a, b) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; leading dims of ``a`` act as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def bw(g, needs):
        g = np.ascontiguousarray(g)
        ga = g @ b.values.T if needs[0] else None
        gb = None
        if needs[1]:
            k, n = b.shape
            gb = a.values.reshape(-1, k).T @ g.reshape(-1, n)
        return ga, gb

    return _result(out, (a, b), bw)


def _norm_axis(axis, ndim: int):
    if axis is None or axis == "all":
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(op_kind: str, a, axis="all", keepdims: bool = False) -> Tensor:
    """sum / mean / max over ``axis`` (int, tuple, or "all").

    max sends the whole gradient to the first maximal element along the
    reduced axes (lowest flat index).
    """
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    if op_kind == "sum":
        out = a.values.sum(axis=axes, keepdims=keepdims)

        def bw(g, needs):
            return (np.broadcast_to(g.reshape(kept_shape), a.shape),)

    elif op_kind == "mean":
        count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        out = a.values.mean(axis=axes, keepdims=keepdims)

        def bw(g, needs):
            return (np.broadcast_to(g.reshape(kept_shape) / count, a.shape),)

    elif op_kind == "max":
        rest = tuple(i for i in range(a.ndim) if i not in axes)
        moved = np.transpose(a.values, rest + axes)
        flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
        arg = np.argmax(flat, axis=-1)
        out_flat = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        out = out_flat.reshape(kept_shape) if keepdims else out_flat

        def bw(g, needs):
            gf = np.zeros_like(flat)
            np.put_along_axis(gf, arg[..., None], np.reshape(g, arg.shape)[..., None], axis=-1)
            gm = gf.reshape(moved.shape)
            return (np.transpose(gm, np.argsort(rest + axes)),)

    else:
        raise ValueError(f"unknown reduction {op_kind!r}")
    return _result(np.asarray(out, dtype=DTYPE), (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _result(out, (a,), lambda g, needs: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.values[index]

    def bw(g, needs):
        ga = np.zeros_like(a.values)
        np.add.at(ga, index, g)
        return (ga,)

    return _result(np.array(out, dtype=DTYPE), (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g, needs):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, ts, bw)


def cumsum(a, axis: int = -1, exclusive: bool = False) -> Tensor:
    """Running sum along ``axis``; ``exclusive`` drops the current element."""
    a = as_tensor(a)
    inc = np.cumsum(a.values, axis=axis)
    out = inc - a.values if exclusive else inc

    def bw(g, needs):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev - g if exclusive else rev,)

    return _result(out, (a,), bw)


# ----------------------------------------------------------------------------
# fused layers


def _scatter_clamped(dst: np.ndarray, src: np.ndarray, offset: int) -> None:
    """dst[..., clamp(n + offset), :] += src[..., n, :] along axis -2."""
    n = dst.shape[-2]
    if offset == 0:
        dst += src
        return
    s = min(abs(offset), n)
    if offset > 0:
        if s < n:
            dst[..., s:, :] += src[..., : n - s, :]
        dst[..., n - 1, :] += src[..., n - s :, :].sum(axis=-2)
    else:
        if s < n:
            dst[..., : n - s, :] += src[..., s:, :]
        dst[..., 0, :] += src[..., :s, :].sum(axis=-2)


def conv1d(features, kernel, per_tap_scale) -> Tensor:
    """Sequence convolution with clamp-to-edge padding and per-tap scaling.

    Args:
        features: ``[..., N, C_in]``.
        kernel: ``[K, C_in, C_out]`` with ``K`` odd; tap ``k`` reads sample
            ``clamp(n + k - K // 2)``.
        per_tap_scale: ``[..., N, K]`` multiplier applied to tap ``k`` of
            output ``n``.

    Returns:
        ``[..., N, C_out]``.
    """
    x, w, s = as_tensor(features), as_tensor(kernel), as_tensor(per_tap_scale)
    if w.ndim != 3:
        raise ShapeError(f"kernel must be K x C_in x C_out, got {w.shape}")
    k, c_in, c_out = w.shape
    if k % 2 == 0:
        raise ConfigError(f"kernel size must be odd, got {k}")
    if x.ndim < 2 or x.shape[-1] != c_in:
        raise ShapeError(f"features {x.shape} do not match kernel {w.shape}")
    n = x.shape[-2]
    if s.shape != x.shape[:-1] + (k,):
        raise ShapeError(f"per_tap_scale must have shape {x.shape[:-1] + (k,)}, got {s.shape}")

    offsets = np.arange(k) - k // 2
    idx = np.clip(np.arange(n)[:, None] + offsets[None, :], 0, n - 1)
    gathered = x.values[..., idx, :]  # [..., N, K, C_in]
    z = gathered * s.values[..., None]
    w_flat = w.values.reshape(k * c_in, c_out)
    out = z.reshape(-1, k * c_in) @ w_flat
    out = out.reshape(x.shape[:-1] + (c_out,))

    def bw(g, needs):
        g2 = np.ascontiguousarray(g).reshape(-1, c_out)
        gx = gw = gs = None
        if needs[1]:
            gw = (z.reshape(-1, k * c_in).T @ g2).reshape(k, c_in, c_out)
        if needs[0] or needs[2]:
            dz = (g2 @ w_flat.T).reshape(gathered.shape)
            if needs[2]:
                gs = np.einsum("...kc,...kc->...k", dz, gathered)
            if needs[0]:
                dg = dz * s.values[..., None]
                gx = np.zeros_like(x.values)
                for j, off in enumerate(offsets):
                    _scatter_clamped(gx, dg[..., j, :], int(off))
        return gx, gw, gs

    return _result(out, (x, w, s), bw)


def batch_norm(x, scale, shift, eps: float = 1e-5, relu: bool = False):
    """Normalize each channel (last axis) over all leading axes.

    With ``relu=True`` the rectifier is fused into the same op.  Returns the
    output tensor plus the batch mean and (biased) variance so the caller can
    maintain running statistics.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[-1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"scale/shift must have shape ({c},)")
    xv = x.values.reshape(-1, c)
    m = xv.shape[0]
    mean = xv.mean(axis=0)
    xhat = xv - mean
    var = np.einsum("mc,mc->c", xhat, xhat) / m
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = xhat * scale.values
    out += shift.values
    if relu:
        np.maximum(out, 0.0, out=out)

    def bw(g, needs):
        g2 = np.ascontiguousarray(g).reshape(-1, c)
        if relu:
            g2 = np.where(out > 0.0, g2, 0.0)
        gx = gscale = gshift = None
        gsum = g2.sum(axis=0)
        gdot = np.einsum("mc,mc->c", g2, xhat)
        if needs[1]:
            gscale = gdot
        if needs[2]:
            gshift = gsum
        if needs[0]:
            k = scale.values * inv
            gx = g2 - gsum / m
            gx -= xhat * (gdot / m)
            gx *= k
            gx = gx.reshape(x.shape)
        return gx, gscale, gshift

    return _result(out.reshape(x.shape), (x, scale, shift), bw), mean, var
