"""Reverse-mode automatic differentiation on dense numpy arrays.

Carries exactly the op set the segmentation nets need: dilated 3x3
convolution, instance normalisation, 2x2 max pooling, x2 bilinear
upsampling, channel concat, pointwise arithmetic and MSE. Ops record onto
an ambient Tape (see `Tape`); with no active tape they run value-only,
which is the evaluation path. Numerical checks run in float64, training
in float32; dtype follows the operands.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, GraphError, ParameterError

__all__ = [
    "Tensor", "Tape", "active_tape", "as_tensor", "record_op", "backward",
    "add", "mul", "scale", "mse", "relu", "sigmoid", "stop_gradient",
    "concat_channels", "maxpool2", "upsample_bilinear2", "instance_norm",
    "conv2d", "same_padding",
]

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of ops; every node's inputs precede the node itself.

    One tape backs one forward/backward cycle. `backward` marks the tape
    consumed and a second call raises, so gradients can never silently
    accumulate across training steps.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        return False


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    """Dense float array, optionally carrying a gradient and a tape link.

    Leaves built with requires_grad=True (parameters) own a persistent
    grad buffer, zero-initialised; op outputs keep grad=None and are
    routed through transient storage during backward.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape", "tape_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.tape: Tape | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self):
        flags = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flags})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: Callable) -> Tensor:
    """Build the output tensor for an op and record it on the active tape.

    backward_fn maps the output gradient to one gradient (or None) per
    input, in input order. Nothing is recorded in evaluation mode or when
    no input requires gradients.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape = tape
        out.tape_id = len(tape.nodes)
        tape.nodes.append(_Node(op, tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad.

    The tape is traversed exactly once, in reverse creation order, which
    is a valid topological order by construction. Unreachable parameters
    keep their zero gradients.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise GraphError("loss is not connected to a tape; run the forward pass "
                         "inside a Tape context")
    if tape.consumed:
        raise GraphError("tape already consumed by a backward pass; gradients do "
                         "not accumulate, rebuild the graph")
    tape.consumed = True

    flowing: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = flowing.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.grad is not None:          # parameter leaf
                t.grad += gi
            elif t.tape is tape:            # intermediate on this tape
                prev = flowing.get(id(t))
                flowing[id(t)] = gi if prev is None else prev + gi


# ---------------------------------------------------------------------------
# pointwise and reduction ops

def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return record_op("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record_op("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)
    return record_op("scale", (x,), x.data * k, lambda g: (g * k,))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements, as a scalar tensor."""
    _check_same_shape("mse", a, b)
    d = a.data - b.data
    k = 2.0 / d.size
    out = np.asarray(np.mean(d * d))

    def bw(g):
        gd = g * k * d
        return (gd, -gd)

    return record_op("mse", (a, b), out, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at 0
    return record_op("relu", (x,), np.maximum(x.data, 0), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # Split form: never exponentiates a positive argument, so large |x|
    # cannot overflow and large negative x stays a small positive value.
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return record_op("sigmoid", (x,), out, bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Value-identical leaf with no tape link: gradients end here."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# structured ops

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects NCHW inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels: incompatible shapes {a.shape} "
                             f"and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record_op("concat_channels", (a, b), out,
                     lambda g: (g[:, :ca], g[:, ca:]))


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2. Ties route gradient to the first
    maximal element in window row-major order."""
    if x.data.ndim != 4:
        raise DimensionError("maxpool2 expects NCHW input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = (x.data.reshape(n, c, h // 2, 2, w // 2, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, h // 2, w // 2, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = (gw.reshape(n, c, h // 2, w // 2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, h, w))
        return (gx,)

    return record_op("maxpool2", (x,), out, bw)


def _interp_indices(n: int, dtype):
    # align-corners-false: source coord of output i is (i + 0.5)/2 - 0.5,
    # clamped; for scale 2 the fractions are exactly 0.25 / 0.75.
    src = (np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(np.int64)
    f = (src - i0).astype(dtype)
    lo = np.clip(i0, 0, n - 1)
    hi = np.clip(i0 + 1, 0, n - 1)
    return lo, hi, f


def upsample_bilinear2(x: Tensor) -> Tensor:
    """x2 bilinear upsampling, align-corners-false.

    Rows (H) are interpolated first, then columns (W); the per-pixel
    expression tree is fixed so a naive reimplementation matches bitwise.
    """
    if x.data.ndim != 4:
        raise DimensionError("upsample_bilinear2 expects NCHW input")
    n, c, h, w = x.shape
    xd = x.data
    r0, r1, fy = _interp_indices(h, xd.dtype)
    c0, c1, fx = _interp_indices(w, xd.dtype)
    wy0 = (1.0 - fy)[None, None, :, None]
    wy1 = fy[None, None, :, None]
    wx0 = (1.0 - fx)[None, None, None, :]
    wx1 = fx[None, None, None, :]

    rows = wy0 * xd[:, :, r0, :] + wy1 * xd[:, :, r1, :]
    out = wx0 * rows[:, :, :, c0] + wx1 * rows[:, :, :, c1]

    def bw(g):
        grows = np.zeros((n, c, 2 * h, w), dtype=g.dtype)
        np.add.at(grows, (slice(None), slice(None), slice(None), c0), g * wx0)
        np.add.at(grows, (slice(None), slice(None), slice(None), c1), g * wx1)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), r0, slice(None)), grows * wy0)
        np.add.at(gx, (slice(None), slice(None), r1, slice(None)), grows * wy1)
        return (gx,)

    return record_op("upsample_bilinear2", (x,), out, bw)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor,
                  eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) normalisation over the spatial extent.

    Chosen over batch statistics because training runs at batch size 1.
    A 1x1 spatial extent has zero variance and collapses to beta.
    """
    if eps <= 0:
        raise ParameterError("instance_norm: eps must be positive")
    if x.data.ndim != 4:
        raise DimensionError("instance_norm expects NCHW input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"instance_norm: affine shapes {gamma.shape}/"
                             f"{beta.shape} do not match {c} channels")
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = xd.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data.reshape(1, c, 1, 1)
    out = gd * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        gxh = g * gd
        gx = inv * (gxh
                    - gxh.mean(axis=(2, 3), keepdims=True)
                    - xhat * (gxh * xhat).mean(axis=(2, 3), keepdims=True))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        return (gx, ggamma, gbeta)

    return record_op("instance_norm", (x, gamma, beta), out, bw)


def same_padding(kernel: int, dilation: int = 1) -> int:
    """Padding that keeps spatial size under stride-1 dilated convolution."""
    return dilation * (kernel - 1) // 2


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: int,
           dilation: int = 1) -> Tensor:
    """Stride-1 dilated 2D convolution, NCHW x OIHW -> NOHW.

    The effective kernel extent is dilation*(K-1)+1; same-size output
    needs padding = dilation*(K-1)/2 for odd K. Internally an im2col/
    matmul formulation; the quadruple-loop definition is kept in the test
    suite as the oracle.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects NCHW input and OIHW weights")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if kh != kw:
        raise DimensionError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if ci != c:
        raise DimensionError(f"conv2d: weight expects {ci} input channels, "
                             f"input has {c}")
    if b.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({o},)")
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ParameterError(f"conv2d: dilation must be a positive int, got "
                             f"{dilation!r}")
    if padding < 0:
        raise ParameterError("conv2d: padding must be non-negative")

    k, d, p = kh, int(dilation), int(padding)
    eff = d * (k - 1) + 1
    ho = h + 2 * p - eff + 1
    wo = wd + 2 * p - eff + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: effective kernel {eff} exceeds padded "
                             f"input {h + 2 * p}x{wd + 2 * p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((n, c, k, k, ho * wo), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki * d:ki * d + ho, kj * d:kj * d + wo]
            cols[:, :, ki, kj, :] = patch.reshape(n, c, ho * wo)
    cols = cols.reshape(n, c * k * k, ho * wo)
    w2 = w.data.reshape(o, c * k * k)
    out = (np.matmul(w2, cols) + b.data.reshape(1, o, 1)).reshape(n, o, ho, wo)

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gb = g2.sum(axis=(0, 2))
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(o, c, k, k)
        gcols = np.matmul(w2.T, g2).reshape(n, c, k, k, ho * wo)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki * d:ki * d + ho, kj * d:kj * d + wo] += \
                    gcols[:, :, ki, kj].reshape(n, c, ho, wo)
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return (gx, gw, gb)

    return record_op("conv2d", (x, w, b), out, bw)
