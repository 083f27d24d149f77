"""Minimal reverse-mode autodiff over numpy arrays.

Values are immutable :class:`Tensor` objects. Differentiation is opt-in: while
a :class:`Tape` is active, every operation whose inputs are *tracked* (watched
by the tape, or produced by an operation already on the tape) is recorded. A
backward pass then walks the record in exact reverse order.

    with Tape() as tape:
        tape.watch(x)
        loss = softmax_cross_entropy(dense(x, w, b), 3)
    (gx,) = tape.gradient(loss, [x])

The layer operations accept a single example (``C,H,W`` / ``N``) or a leading
batch axis. Arithmetic is single precision unless the caller explicitly builds
float64 tensors (used by :func:`finite_diff_check`).
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, NumericError, PreconditionError, TargetIndexError

_FLOAT_TYPES = (np.float32, np.float64)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """Immutable n-d array of finite reals with shape metadata."""

    __slots__ = ("_data",)

    def __init__(self, data, dtype=np.float32):
        arr = np.array(data, dtype=dtype, order="C", copy=True)
        _check_finite(arr, "tensor construction")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray, what: str) -> "Tensor":
        # internal constructor: keeps dtype, skips the copy
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        _check_finite(arr, what)
        arr.setflags(write=False)
        out = cls.__new__(cls)
        out._data = arr
        return out

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the row-major storage, shaped."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    def flat(self) -> np.ndarray:
        return self._data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float(self._data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


# --------------------------------------------------------------------------- tape


@dataclass
class _Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


_local = threading.local()


def _active_tapes() -> list["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


class Tape:
    """Ordered record of executed operations, confined to one thread."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._keep: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes().remove(self)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked.add(id(t))
            self._keep.append(t)

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, node: _Node) -> None:
        self.nodes.append(node)
        self._tracked.add(id(node.output))

    def gradient(
        self,
        target: Tensor,
        sources: Iterable[Tensor],
        upstream: np.ndarray | None = None,
    ) -> list[np.ndarray]:
        """Gradients of ``target`` with respect to each source (the capture set).

        Without ``upstream`` the target is reduced by summation, i.e. the seed
        gradient is all ones. Intermediates outside the capture set are dropped
        as soon as the backward pass is past them.
        """
        sources = list(sources)
        capture = {id(s) for s in sources}
        if upstream is None:
            upstream = np.ones(target.shape, dtype=target.dtype)
        elif upstream.shape != target.shape:
            raise DimensionError(f"upstream shape {upstream.shape} != target shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.asarray(upstream, dtype=target.dtype)}
        kept: dict[int, np.ndarray] = {}
        if id(target) in capture:
            kept[id(target)] = grads[id(target)]
        for node in reversed(self.nodes):
            key = id(node.output)
            g = grads.pop(key, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or id(inp) not in self._tracked:
                    continue
                _check_finite(gi, f"{node.name} backward")
                k = id(inp)
                grads[k] = grads[k] + gi if k in grads else gi
                if k in capture:
                    kept[k] = grads[k]
        out = []
        for s in sources:
            g = kept.get(id(s))
            out.append(np.zeros(s.shape, dtype=s.dtype) if g is None else np.asarray(g, dtype=s.dtype))
        return out


def _emit(name: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    result = Tensor._wrap(out, name)
    for tape in _active_tapes():
        if any(tape.is_tracked(t) for t in inputs):
            tape._record(_Node(inputs, result, backward, name))
    return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------- layers


def _conv_geometry(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> tuple[int, int]:
    if w.ndim != 4:
        raise DimensionError(f"kernel must be 4-d (C_out,C_in,kH,kW), got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    hp, wp = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    kh, kw = w.shape[2:]
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ConfigurationError(
            f"output size not integral for input {x.shape[2]}x{x.shape[3]}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    return (hp - kh) // stride + 1, (wp - kw) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding; input ``(C,H,W)`` or ``(N,C,H,W)``."""
    xd, w, b = x.data, kernel.data, bias.data
    single = xd.ndim == 3
    if single:
        xd = xd[None]
    if xd.ndim != 4:
        raise DimensionError(f"conv2d input must be 3-d or 4-d, got shape {x.shape}")
    ho, wo = _conv_geometry(xd, w, stride, padding)
    if b.shape != (w.shape[0],):
        raise DimensionError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    kh, kw = w.shape[2:]
    p = padding
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    n, c = xd.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col: rows (n, y, x), columns (c, i, j)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.reshape(w.shape[0], -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, -1).transpose(0, 3, 1, 2) + b[None, :, None, None]

    def backward(g):
        g4 = g[None] if single else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
        gb = gmat.sum(axis=0)
        gw = (gmat.T @ cols).reshape(w.shape)
        dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=dcols.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + xd.shape[2], p : p + xd.shape[3]] if p else gxp
        return (gx[0] if single else gx), gw, gb

    return _emit("conv2d", out[0] if single else out, (x, kernel, bias), backward)


def conv2d_backward(upstream, x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0):
    """``(grad_input, grad_kernel, grad_bias)`` of :func:`conv2d` for a given upstream gradient."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    with Tape() as tape:
        tape.watch(x, kernel, bias)
        out = conv2d(x, kernel, bias, stride, padding)
    up = np.asarray(upstream.data if isinstance(upstream, Tensor) else upstream, dtype=out.dtype)
    return tuple(tape.gradient(out, [x, kernel, bias], upstream=up))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling over the last two axes.

    Ties route the gradient to the first position in row-major window order.
    """
    xd = x.data
    if xd.ndim < 2:
        raise DimensionError(f"maxpool2x2 needs at least 2 dims, got shape {x.shape}")
    h, w = xd.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    lead = xd.shape[:-2]
    blocks = xd.reshape(*lead, h // 2, 2, w // 2, 2)
    nd = len(lead)
    perm = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3)
    windows = blocks.transpose(perm).reshape(*lead, h // 2, w // 2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(onehot, arg[..., None], g[..., None], axis=-1)
        inv = tuple(range(nd)) + (nd, nd + 2, nd + 1, nd + 3)
        back = onehot.reshape(*lead, h // 2, w // 2, 2, 2).transpose(inv)
        return (back.reshape(xd.shape),)

    return _emit("maxpool2x2", out, (x,), backward)


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weights @ x + bias``; input ``(N,)`` or ``(B,N)``."""
    xd, w, b = x.data, weights.data, bias.data
    if w.ndim != 2 or xd.shape[-1] != w.shape[1] or xd.ndim not in (1, 2):
        raise DimensionError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} incompatible with weights {weights.shape}")
    out = xd @ w.T + b

    def backward(g):
        if xd.ndim == 1:
            return g @ w, np.outer(g, xd), g
        return g @ w, g.T @ xd, g.sum(axis=0)

    return _emit("dense", out, (x, weights, bias), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """``-log softmax(logits)[target]``; batched logits give the batch mean."""
    z = logits.data
    k = z.shape[-1]
    tgt = np.asarray(target)
    if z.ndim == 1:
        if tgt.ndim != 0:
            raise DimensionError("a single logit vector takes a scalar target")
    elif z.ndim == 2:
        if tgt.shape != (z.shape[0],):
            raise DimensionError(f"targets shape {tgt.shape} does not match batch {z.shape[0]}")
    else:
        raise DimensionError(f"logits must be 1-d or 2-d, got shape {logits.shape}")
    if not np.issubdtype(tgt.dtype, np.integer) or (tgt < 0).any() or (tgt >= k).any():
        raise TargetIndexError(f"target {target!r} outside [0, {k})")
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    if z.ndim == 1:
        loss = log_norm - shifted[tgt]
    else:
        loss = (log_norm - shifted[np.arange(len(tgt)), tgt]).mean()
    probs = softmax(z)

    def backward(g):
        grad = probs.copy()
        if z.ndim == 1:
            grad[tgt] -= 1
            return (grad * g,)
        grad[np.arange(len(tgt)), tgt] -= 1
        return (grad * (g / len(tgt)),)

    return _emit("softmax_cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), backward)


# --------------------------------------------------------------------------- plumbing ops


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    f = np.asarray(factor, dtype=x.dtype)
    return _emit("scale", x.data * f, (x,), lambda g: (g * f,))


def select(x: Tensor, index) -> Tensor:
    """``x[index]`` with any numpy index; repeated indices accumulate gradient."""
    out = np.asarray(x.data[index])

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _emit("select", out, (x,), backward)


def total(x: Tensor) -> Tensor:
    return _emit("total", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over the last two axes: ``(..., H, W) -> (...)``."""
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))
    return _emit("spatial_mean", out, (x,),
                 lambda g: (np.broadcast_to(g[..., None, None] / (h * w), x.shape).astype(x.dtype),))


# --------------------------------------------------------------------------- checking


def finite_diff_check(fn: Callable[[Tensor], Tensor], x, step: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a tensor to a scalar tensor using the ops above. The check is
    evaluated in double precision so that rounding in the difference quotient
    stays well below typical tolerances.
    """
    if not step > 0:
        raise PreconditionError(f"finite-difference step must be positive, got {step}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base, dtype=np.float64)
    with Tape() as tape:
        tape.watch(xt)
        y = fn(xt)
    if y.size != 1:
        raise DimensionError(f"finite_diff_check needs a scalar output, got shape {y.shape}")
    (analytic,) = tape.gradient(y, [xt])
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(Tensor(base, dtype=np.float64)).item()
        flat[i] = orig - step
        lo = fn(Tensor(base, dtype=np.float64)).item()
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2 * step)
    _check_finite(numeric, "finite differences")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
