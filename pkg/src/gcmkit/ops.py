"""Primitive differentiable operations recorded on a tape.

The set is deliberately small: dense, 2-D convolution, relu, 2x2 max-pool,
flatten, elementwise add/mul/scale/sin/cos, full-tensor sum, and fused
softmax cross-entropy. Shapes are explicit everywhere; the only broadcast
is the bias add inside dense/conv2d. Values are float32; dot products and
reductions accumulate in float64 before rounding back, and scalar
reduction outputs stay float64 on the tape.
"""

import numpy as np

from .autodiff import Tape, Node, require_same_shape
from .errors import ShapeMismatchError


def _f64(a):
    return np.asarray(a, dtype=np.float64)


def _f32(a):
    # values may saturate to inf here; the forward pass checks every layer
    # output and reports the offending layer by name
    with np.errstate(over="ignore"):
        return np.asarray(a, dtype=np.float32)


# ---------------------------------------------------------------------------
# linear layers


def dense(tape: Tape, x: Node, w: Node, b: Node) -> Node:
    """y = x @ w + b for x:(N,D), w:(D,K), b:(K,)."""
    if x.value.ndim != 2 or w.value.ndim != 2 or b.value.ndim != 1:
        raise ShapeMismatchError(
            f"dense: expected x:(N,D), w:(D,K), b:(K,), got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"dense: inner dims do not compose: x{x.shape} @ w{w.shape} + b{b.shape}")
    x64 = _f64(x.value)
    w64 = _f64(w.value)
    value = _f32(x64 @ w64 + _f64(b.value))

    def vjp(g):
        g64 = _f64(g)
        return (_f32(g64 @ w64.T), _f32(x64.T @ g64), _f32(g64.sum(axis=0)))

    return tape.record(value, (x, w, b), vjp, "dense")


def _im2col(xp64, kh, kw, stride, oh, ow):
    n, _, _, c = xp64.shape
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp64[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :]
    return cols.reshape(n * oh * ow, kh * kw * c)


def conv2d(tape: Tape, x: Node, k: Node, b: Node, stride: int = 1, padding: int = 0) -> Node:
    """2-D convolution (cross-correlation), NHWC layout.

    x:(N,H,W,C), k:(KH,KW,C,F), b:(F,); zero padding; output
    (N, (H+2p-KH)//s+1, (W+2p-KW)//s+1, F).
    """
    if x.value.ndim != 4 or k.value.ndim != 4 or b.value.ndim != 1:
        raise ShapeMismatchError(
            f"conv2d: expected x:(N,H,W,C), k:(KH,KW,C,F), b:(F,), got {x.shape}, {k.shape}, {b.shape}")
    n, h, w_, c = x.shape
    kh, kw, kc, f = k.shape
    if kc != c or b.shape[0] != f:
        raise ShapeMismatchError(f"conv2d: channel mismatch: x{x.shape}, k{k.shape}, b{b.shape}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w_ + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeMismatchError(f"conv2d: kernel {k.shape} too large for input {x.shape}")

    xp = x.value
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    xp64 = _f64(xp)
    cols = _im2col(xp64, kh, kw, stride, oh, ow)          # (N*OH*OW, KH*KW*C)
    k64 = _f64(k.value).reshape(kh * kw * c, f)
    value = _f32((cols @ k64 + _f64(b.value)).reshape(n, oh, ow, f))

    def vjp(g):
        g64 = _f64(g).reshape(n * oh * ow, f)
        gk = _f32((cols.T @ g64).reshape(kh, kw, c, f))
        gb = _f32(g64.sum(axis=0))
        gcols = (g64 @ k64.T).reshape(n, oh, ow, kh, kw, c)
        gxp = np.zeros(xp64.shape, dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + oh * stride:stride, j:j + ow * stride:stride, :] += gcols[:, :, :, i, j, :]
        if padding:
            gxp = gxp[:, padding:padding + h, padding:padding + w_, :]
        return (_f32(gxp), gk, gb)

    return tape.record(value, (x, k, b), vjp, "conv2d")


# ---------------------------------------------------------------------------
# shape and nonlinearity


def relu(tape: Tape, x: Node) -> Node:
    # subgradient at exactly 0 is 0; sign-based attacks are sensitive to this
    mask = x.value > 0
    value = np.where(mask, x.value, np.float32(0.0))

    def vjp(g):
        return (_f32(g * mask),)

    return tape.record(value, (x,), vjp, "relu")


def maxpool2(tape: Tape, x: Node) -> Node:
    """2x2 max-pool with stride 2, NHWC; trailing odd rows/columns are dropped.
    Ties route the gradient to the first element in scan order."""
    if x.value.ndim != 4:
        raise ShapeMismatchError(f"maxpool2: expected (N,H,W,C), got {x.shape}")
    n, h, w_, c = x.shape
    oh, ow = h // 2, w_ // 2
    if oh == 0 or ow == 0:
        raise ShapeMismatchError(f"maxpool2: input {x.shape} smaller than the 2x2 window")
    xt = x.value[:, :oh * 2, :ow * 2, :]
    windows = xt.reshape(n, oh, 2, ow, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, 4)
    arg = windows.argmax(axis=-1)       # first max wins on ties
    value = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros((n, oh, ow, c, 4), dtype=np.float32)
        np.put_along_axis(gw, arg[..., None], _f32(g)[..., None], axis=-1)
        gx = np.zeros((n, h, w_, c), dtype=np.float32)
        gx[:, :oh * 2, :ow * 2, :] = (
            gw.reshape(n, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, oh * 2, ow * 2, c))
        return (gx,)

    return tape.record(value, (x,), vjp, "maxpool2")


def flatten(tape: Tape, x: Node) -> Node:
    """(N, ...) -> (N, prod(...)) in row-major order."""
    n = x.shape[0]
    shape = x.shape
    value = x.value.reshape(n, -1)

    def vjp(g):
        return (_f32(g).reshape(shape),)

    return tape.record(value, (x,), vjp, "flatten")


# ---------------------------------------------------------------------------
# elementwise


def add(tape: Tape, a: Node, b: Node) -> Node:
    require_same_shape(a.value, b.value, "add")
    value = a.value + b.value

    def vjp(g):
        return (g, g)

    return tape.record(value, (a, b), vjp, "add")


def mul(tape: Tape, a: Node, b: Node) -> Node:
    require_same_shape(a.value, b.value, "mul")
    av, bv = a.value, b.value
    value = av * bv

    def vjp(g):
        return (_f32(g * bv), _f32(g * av))

    return tape.record(value, (a, b), vjp, "mul")


def scale(tape: Tape, x: Node, c: float) -> Node:
    c = float(c)
    value = np.asarray(x.value * c, dtype=x.value.dtype)

    def vjp(g):
        return (np.asarray(g * c, dtype=g.dtype),)

    return tape.record(value, (x,), vjp, "scale")


def sin(tape: Tape, x: Node) -> Node:
    value = np.sin(x.value)
    cosx = np.cos(x.value)

    def vjp(g):
        return (_f32(g * cosx),)

    return tape.record(value, (x,), vjp, "sin")


def cos(tape: Tape, x: Node) -> Node:
    value = np.cos(x.value)
    sinx = np.sin(x.value)

    def vjp(g):
        return (_f32(-g * sinx),)

    return tape.record(value, (x,), vjp, "cos")


# ---------------------------------------------------------------------------
# reductions


def sum_all(tape: Tape, x: Node) -> Node:
    """Sum of all elements; 64-bit accumulator, scalar node kept in float64."""
    value = np.asarray(np.sum(_f64(x.value)))
    shape = x.shape

    def vjp(g):
        return (np.full(shape, np.float32(g), dtype=np.float32),)

    return tape.record(value, (x,), vjp, "sum")


def softmax_cross_entropy(tape: Tape, logits: Node, labels) -> Node:
    """Mean cross-entropy of softmax(logits) against integer labels.

    logits:(N,K); labels: N integers in [0,K). The scalar loss is computed
    and kept in float64; the gradient is (softmax - onehot)/N.
    """
    if logits.value.ndim != 2:
        raise ShapeMismatchError(f"softmax_cross_entropy: expected (N,K) logits, got {logits.shape}")
    y = np.asarray(labels)
    n, k = logits.shape
    if y.shape != (n,):
        raise ShapeMismatchError(f"softmax_cross_entropy: expected {n} labels, got shape {y.shape}")
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    y = y.astype(np.int64)

    z = _f64(logits.value)
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    p = expz / expz.sum(axis=1, keepdims=True)
    logp = z - np.log(expz.sum(axis=1, keepdims=True))
    value = np.asarray(-logp[np.arange(n), y].mean())

    def vjp(g):
        gz = p.copy()
        gz[np.arange(n), y] -= 1.0
        return (_f32(gz * (float(g) / n)),)

    return tape.record(value, (logits,), vjp, "softmax_cross_entropy")
