"""Dense float64 tensors with tape-based reverse-mode differentiation.

Values are float64; ``np.longdouble`` inputs stay extended precision through
every op (used by the finite-difference oracle). Operations are plain functions over :class:`Tensor`. When a :class:`Tape` is
active (``with Tape() as tape:``) and any input requires a gradient, the op
records a backward rule on the tape; otherwise it is a pure numpy forward.

All ops broadcast over leading axes, so the same model code runs on a single
sample, a batch, or a stack of perturbed parameter copies.
"""

from __future__ import annotations

import builtins
import os
from typing import Callable, Sequence

import numpy as np

DEBUG = os.environ.get("MVIRTS_DEBUG", "") not in ("", "0")

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class DimensionError(ValueError):
    pass


class TapeStateError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        self.data = arr if arr.dtype == np.longdouble else arr.astype(np.float64, copy=False)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor) -> float:
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed ops; supports one backward pass per reset."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], rule: Callable) -> None:
        if self._used:
            raise TapeStateError("tape already consumed by backward(); call reset() first")
        self.nodes.append((out, parents, rule))

    def reset(self) -> None:
        self.nodes = []
        self._used = False

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf.

        Tensors in ``params`` that the loss does not depend on get a zero grad.
        """
        if self._used:
            raise TapeStateError("backward() called twice on the same tape without reset()")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._used = True
        produced = {id(out) for out, _, _ in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, parents, rule in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if key not in produced:
                    leaves[key] = parent
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


_ACTIVE: list[Tape] = []


def current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(loss: Tensor, tape: Tape, params: Sequence[Tensor] = ()) -> None:
    tape.backward(loss, params)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def _make(data: np.ndarray, parents: tuple[Tensor, ...], rule: Callable) -> Tensor:
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError("non-finite output from finite inputs")
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, rule)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # exp(-|z|) never overflows, and the negative branch keeps its relative precision
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(c (x + a x^3)))."""
    u = x.data
    u2 = u * u  # explicit products: integer powers go through the much slower pow()
    t = np.tanh(_GELU_C * (u + _GELU_A * u2 * u))

    def rule(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * u2)
        return (g * (0.5 * (1.0 + t) + 0.5 * u * dt),)

    return _make(0.5 * u * (1.0 + t), (x,), rule)


def gated_activation(x: Tensor, offset: float = 0.0) -> Tensor:
    """tanh(x) * sigmoid(x + offset); ``offset`` shifts only the gate branch."""
    t = np.tanh(x.data)
    s = _sigmoid(x.data + offset)
    return _make(
        t * s,
        (x,),
        lambda g: (g * ((1.0 - t * t) * s + t * s * (1.0 - s)),),
    )


# -- shape ------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def swapaxes(x: Tensor, a1: int = -1, a2: int = -2) -> Tensor:
    return _make(
        np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),)
    )


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(x, -1, -2)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat needs at least one part")
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts:
        if p.ndim != ndim or p.shape[ax + 1:] != parts[0].shape[ax + 1:]:
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes "
                f"{[q.shape for q in parts]}"
            )
    try:
        lead = np.broadcast_shapes(*[p.shape[:ax] for p in parts])
    except ValueError as exc:
        raise DimensionError(f"concat: leading axes do not broadcast: {exc}") from None
    arrays = [np.broadcast_to(p.data, lead + p.shape[ax:]) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(
            unbroadcast(piece, p.shape)
            for piece, p in zip(np.split(g, bounds, axis=axis), parts)
        )

    return _make(np.concatenate(arrays, axis=axis), tuple(parts), rule)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack token blocks ``[..., n_i, E]`` into ``[..., sum(n_i), E]``."""
    cols = {p.shape[-1] for p in parts}
    if len(cols) > 1:
        raise DimensionError(
            f"concat_rows: column counts differ: {[p.shape for p in parts]}"
        )
    return concat(parts, axis=-2)


def split_rows(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if builtins.sum(sizes) != x.shape[-2]:
        raise DimensionError(
            f"split_rows: sizes {list(sizes)} do not sum to row count {x.shape[-2]}"
        )
    out = []
    start = 0
    for n in sizes:
        out.append(_slice_rows(x, start, start + n))
        start += n
    return out


def _slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    def rule(g):
        full = np.zeros_like(x.data)
        full[..., lo:hi, :] = g
        return (full,)

    return _make(x.data[..., lo:hi, :], (x,), rule)


# -- reductions -------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def rule(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), rule)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, with per-row max shift."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


softmax_rows = softmax


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return (
            unbroadcast(gx, x.shape),
            unbroadcast(g * xhat, gain.shape),
            unbroadcast(g, bias.shape),
        )

    if n < 1:
        raise DimensionError("layer_norm needs at least one column")
    return _make(out, (x, gain, bias), rule)


def _shift_stack(x: np.ndarray, width: int, dilation: int) -> np.ndarray:
    """``[..., C, L] -> [..., W, C, L]`` where slot w holds x[..., t + off_w]."""
    length = x.shape[-1]
    centre = width // 2
    out = np.zeros(x.shape[:-2] + (width,) + x.shape[-2:], dtype=x.dtype)
    for w in range(width):
        off = (w - centre) * dilation
        lo, hi = max(0, -off), min(length, length - off)
        if lo < hi:
            out[..., w, :, lo:hi] = x[..., lo + off:hi + off]
    return out


def _unshift_stack(gs: np.ndarray, width: int, dilation: int) -> np.ndarray:
    length = gs.shape[-1]
    centre = width // 2
    gx = np.zeros(gs.shape[:-3] + gs.shape[-2:], dtype=gs.dtype)
    for w in range(width):
        off = (w - centre) * dilation
        lo, hi = max(0, -off), min(length, length - off)
        if lo < hi:
            gx[..., lo + off:hi + off] += gs[..., w, :, lo:hi]
    return gx


def dilated_conv1d(
    x: Tensor, kernels: Tensor, dilation: int, bias: Tensor | None = None
) -> Tensor:
    """Length-preserving dilated convolution with centred kernels.

    ``x`` is ``[..., C_in, L]``, ``kernels`` is ``[..., C_out, C_in, W]``;
    ``out[c, t] = sum_{i,w} k[c, i, w] * x[i, t + (w - W//2) * dilation]``
    with zero padding.
    """
    if int(dilation) != dilation or dilation < 1:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    x, kernels = as_tensor(x), as_tensor(kernels)
    c_out, c_in, width = kernels.shape[-3:]
    if x.shape[-2] != c_in:
        raise DimensionError(
            f"dilated_conv1d: input has {x.shape[-2]} channels, kernels expect {c_in}"
        )
    if x.shape[-1] < 1:
        raise DimensionError("dilated_conv1d: sequence length must be >= 1")
    xs = _shift_stack(x.data, width, dilation)                    # [..., W, C_in, L]
    xs_flat = xs.reshape(xs.shape[:-3] + (width * c_in, xs.shape[-1]))
    kmat = np.swapaxes(kernels.data, -1, -2)                      # [..., C_out, W, C_in]
    kmat = kmat.reshape(kmat.shape[:-2] + (width * c_in,))
    out = kmat @ xs_flat
    parents: tuple[Tensor, ...] = (x, kernels)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[..., None]
        parents = parents + (bias,)

    def rule(g):
        gk = g @ np.swapaxes(xs_flat, -1, -2)                     # [..., C_out, W*C_in]
        gk = gk.reshape(gk.shape[:-1] + (width, c_in))
        gk = unbroadcast(np.swapaxes(gk, -1, -2), kernels.shape)
        gxs = np.swapaxes(kmat, -1, -2) @ g                       # [..., W*C_in, L]
        gxs = gxs.reshape(gxs.shape[:-2] + (width, c_in, gxs.shape[-1]))
        gx = unbroadcast(_unshift_stack(gxs, width, dilation), x.shape)
        grads = [gx, gk]
        if bias is not None:
            grads.append(unbroadcast(g.sum(axis=-1), bias.shape))
        return tuple(grads)

    return _make(out, parents, rule)


# -- losses / regularisation ------------------------------------------------

def cross_entropy(
    logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None
) -> Tensor:
    """Weighted mean negative log-likelihood over the sample axis (-2).

    ``logits`` is ``[..., B, C]`` and the result has shape ``[...]``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n_cls = logits.shape[-1]
    onehot = np.eye(n_cls)[labels]                                # [B, C]
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, float)[labels]
    coef = -(onehot * (w / w.sum())[:, None])
    return sum(mul(log_softmax(logits), coef), axis=(-2, -1))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)
