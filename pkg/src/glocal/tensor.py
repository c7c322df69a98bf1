"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything downstream (backbone, attention, losses) is built from the
operations in this module.  Values are plain numpy arrays in float64;
gradients are accumulated on ``Tensor.grad`` by replaying a ``Tape`` in
reverse.  Only scalar-vs-tensor and identical-shape broadcasting is
supported: silent numpy broadcasting is the dominant source of shape bugs
in hand-rolled nets, so anything else raises ``ShapeError``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A tensor acquired NaN or Inf values."""


class Tensor:
    """A dense n-dimensional float64 array with an optional gradient slot.

    Tensors are immutable by convention once created (ops return new
    tensors); the exceptions are ``grad`` accumulation and optimizer
    updates, which mutate ``data`` in place between forward passes.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def const(data) -> Tensor:
    """A tensor that never receives gradient (labels, masks, constants)."""
    return Tensor(data, requires_grad=False)


# A backward rule maps the output gradient to one gradient (or None) per input.
BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeEntry:
    output: Tensor
    inputs: tuple
    rule: BackwardRule


class Tape:
    """Ordered record of differentiable operations.

    Operations append entries in execution order, which is topological by
    construction; ``backward`` replays them in reverse.  A tape is
    single-threaded: install it with ``with Tape() as tape:`` around a
    forward pass and never share it across threads.
    """

    current: Optional["Tape"] = None

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self._outer: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._outer = Tape.current
        Tape.current = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape.current = self._outer
        return False

    def record(self, output: Tensor, inputs: tuple, rule: BackwardRule):
        self.entries.append(TapeEntry(output, inputs, rule))

    def backward(self, loss: Tensor, leaves: Sequence[Tensor] = ()):
        """Accumulate d(loss)/d(x) onto ``x.grad`` for every tensor on the tape.

        ``loss`` must be scalar.  Leaves listed in ``leaves`` that the loss
        does not depend on get an explicit zero gradient rather than None.
        Replaying twice yields bit-identical results: all gradients touched
        by this tape are cleared before the walk.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not self.entries:
            raise ValueError("backward on an empty tape")
        for entry in self.entries:
            entry.output.grad = None
            for t in entry.inputs:
                t.grad = None
        loss.grad = np.ones_like(loss.data)
        for entry in reversed(self.entries):
            out_grad = entry.output.grad
            if out_grad is None:
                continue
            grads = entry.rule(out_grad)
            for inp, g in zip(entry.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                # rules hand out fresh arrays (or read-only pass-through
                # views), so the first accumulation can bind without a copy
                inp.grad = g if inp.grad is None else inp.grad + g
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def _finish(out: Tensor, inputs: tuple, rule: BackwardRule) -> Tensor:
    """Register the op on the active tape when any input takes gradient."""
    tape = Tape.current
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, rule)
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary_plan(a: Tensor, b: Tensor):
    """Validate shapes; only identical shapes or a size-1 operand broadcast."""
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"shapes {a.data.shape} and {b.data.shape} do not broadcast "
                     "(only scalar-vs-tensor is allowed)")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    # undo scalar broadcast by total reduction
    if grad.shape == tuple(shape):
        return grad
    return np.sum(grad).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_plan(a, b)
    out = Tensor(a.data + b.data)

    def rule(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _finish(out, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_plan(a, b)
    out = Tensor(a.data - b.data)

    def rule(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _finish(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_plan(a, b)
    out = Tensor(a.data * b.data)

    def rule(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return _finish(out, (a, b), rule)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = Tensor(a.data * factor)

    def rule(g):
        return (g * factor,)

    return _finish(out, (a,), rule)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0  # subgradient 0 at the kink

    def rule(g):
        return (g * mask,)

    return _finish(out, (a,), rule)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_values(a.data)
    out = Tensor(s)

    def rule(g):
        return (g * s * (1.0 - s),)

    return _finish(out, (a,), rule)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise ValueError("log of non-positive value")
    out = Tensor(np.log(a.data))

    def rule(g):
        return (g / a.data,)

    return _finish(out, (a,), rule)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient is zero outside the interval."""
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data >= lo) & (a.data <= hi)

    def rule(g):
        return (g * inside,)

    return _finish(out, (a,), rule)


# ---------------------------------------------------------------------------
# linear algebra / shape
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _finish(out, (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Row-major affine map: (T, n_in) @ weight.T + bias, weight (n_out, n_in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"linear: input dim {x.data.shape[1]} vs weight {weight.data.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    if bias is None:
        return _finish(out, (x, weight),
                       lambda g: (g @ weight.data, g.T @ x.data))

    def rule(g):
        return g @ weight.data, g.T @ x.data, np.sum(g, axis=0)

    return _finish(out, (x, weight, bias), rule)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    out = Tensor(a.data.T.copy())

    def rule(g):
        return (g.T,)

    return _finish(out, (a,), rule)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape

    def rule(g):
        return (g.reshape(orig),)

    return _finish(out, (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish(out, tuple(tensors), rule)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.data[index].copy())

    def rule(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _finish(out, (a,), rule)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) on CHW or NCHW input.

    weight is (C_out, C_in, kh, kw).  Output spatial size is
    floor((in + 2*pad - kernel)/stride) + 1.  Lowered to one GEMM over an
    im2col patch matrix; the patches are kept for the backward GEMMs.
    """
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d expects CHW or NCHW input, got {x.data.shape}")
    n, c_in, h, w = xd.shape
    c_out, c_in_w, kh, kw = weight.data.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv2d channel mismatch: input {c_in}, weight {c_in_w}")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("conv2d: kernel larger than padded input")

    if pad:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = xd
    # im2col: (N, C_in, kh, kw, H_out, W_out) strided view, then one copy
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c_in, kh, kw, h_out, w_out),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride))
    patches = np.ascontiguousarray(view).reshape(n, c_in * kh * kw, h_out * w_out)
    wmat = weight.data.reshape(c_out, c_in * kh * kw)
    y = np.matmul(wmat, patches)  # (N, C_out, H_out*W_out)
    y = y.reshape(n, c_out, h_out, w_out)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    out = Tensor(y[0] if squeeze else y)

    def rule(g):
        gd = g[None] if squeeze else g
        gmat = gd.reshape(n, c_out, h_out * w_out)
        gw = np.einsum("nop,nkp->ok", gmat, patches, optimize=True) \
            .reshape(weight.data.shape)
        gpatches = np.matmul(wmat.T, gmat).reshape(
            n, c_in, kh, kw, h_out, w_out)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, :, di:di + h_out * stride:stride,
                    dj:dj + w_out * stride:stride] += gpatches[:, :, di, dj]
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(np.sum(gd, axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _finish(out, inputs, rule)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D tensor")
    if a.data.shape[1] == 0:
        raise ShapeError("softmax over an empty axis")
    z = a.data - np.max(a.data, axis=1, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=1, keepdims=True)
    out = Tensor(s)

    def rule(g):
        dot = np.sum(g * s, axis=1, keepdims=True)
        return ((g - dot) * s,)

    return _finish(out, (a,), rule)


def max_over_axis(a: Tensor, axis: int) -> Tensor:
    """Max reduction of a 2-D tensor along one axis; gradient goes to argmax."""
    if a.data.ndim != 2:
        raise ShapeError("max_over_axis expects a 2-D tensor")
    if a.data.shape[axis] == 0:
        raise ShapeError("max over an empty axis")
    idx = np.argmax(a.data, axis=axis)  # first occurrence on ties
    out = Tensor(np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis))

    def rule(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _finish(out, (a,), rule)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial maximum of a CHW tensor, returning a C-vector."""
    if x.data.ndim != 3:
        raise ShapeError("global_max_pool expects a CHW tensor")
    c = x.data.shape[0]
    return max_over_axis(reshape(x, (c, -1)), axis=1)


def max_pool2d(x: Tensor, size: int = 2, stride: Optional[int] = None) -> Tensor:
    """Non-overlapping spatial max pooling on CHW or NCHW input.

    Trailing rows/cols that do not fill a window are dropped (floor mode).
    """
    if stride is None:
        stride = size
    if stride != size:
        raise ShapeError("max_pool2d supports only stride == window size")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    h2, w2 = h // size, w // size
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"max_pool2d window {size} larger than input {h}x{w}")
    slices = [xd[:, :, di:h2 * size:size, dj:w2 * size:size]
              for di in range(size) for dj in range(size)]
    y = slices[0].copy()
    for sl in slices[1:]:
        np.maximum(y, sl, out=y)
    out = Tensor(y[0] if squeeze else y)

    def rule(g):
        gd = g[None] if squeeze else g
        gx = np.zeros_like(xd)
        taken = np.zeros(y.shape, dtype=bool)  # first max wins a tie
        for pos, sl in enumerate(slices):
            di, dj = divmod(pos, size)
            wins = (sl == y) & ~taken
            taken |= wins
            gx[:, :, di:h2 * size:size, dj:w2 * size:size] += gd * wins
        return (gx[0] if squeeze else gx,)

    return _finish(out, (x,), rule)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data))

    def rule(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _finish(out, (a,), rule)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    out = Tensor(np.mean(a.data))

    def rule(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _finish(out, (a,), rule)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BNState:
    """Learnable affine plus running statistics for one batch-norm layer.

    Running variance is the population (biased) variance, matching the
    batch statistic used in train mode.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> "BNState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def batch_norm(x: Tensor, state: BNState, train: bool) -> Tensor:
    """Channel-wise batch normalization of CHW or NCHW input.

    Train mode normalizes with the batch-spatial statistics of ``x`` and
    updates the running statistics in place with momentum m:
    mu_t <- (1-m)*mu_t + m*mu_B.  Eval mode uses the stored running
    statistics.  ``state.eps`` must be > 0.
    """
    if state.eps <= 0.0:
        raise ValueError("batch_norm requires eps > 0")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"batch_norm expects CHW or NCHW input, got {x.data.shape}")
    n, c, h, w = xd.shape
    if c != state.channels:
        raise ShapeError(f"batch_norm channel mismatch: input {c}, state {state.channels}")

    gamma, beta = state.gamma, state.beta
    if train:
        count = n * h * w
        if count < 2:
            raise ShapeError("batch_norm train mode needs a batch-spatial population >= 2")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean *= (1.0 - m)
        state.running_mean += m * mean
        state.running_var *= (1.0 - m)
        state.running_var += m * var
    else:
        count = 0
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(y[0] if squeeze else y)

    if train:
        def rule(g):
            gd = g[None] if squeeze else g
            ggamma = np.sum(gd * xhat, axis=(0, 2, 3))
            gbeta = np.sum(gd, axis=(0, 2, 3))
            # full train-mode gradient: mean and var both depend on x
            gxhat = gd * gamma.data[None, :, None, None]
            mean_g = gxhat.mean(axis=(0, 2, 3))
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3))
            gx = (gxhat - mean_g[None, :, None, None]
                  - xhat * mean_gx[None, :, None, None]) * inv_std[None, :, None, None]
            return (gx[0] if squeeze else gx, ggamma, gbeta)
    else:
        def rule(g):
            gd = g[None] if squeeze else g
            ggamma = np.sum(gd * xhat, axis=(0, 2, 3))
            gbeta = np.sum(gd, axis=(0, 2, 3))
            gx = gd * (gamma.data * inv_std)[None, :, None, None]
            return (gx[0] if squeeze else gx, ggamma, gbeta)

    return _finish(out, (x, gamma, beta), rule)
