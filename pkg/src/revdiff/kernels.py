"""Dense numeric kernels on contiguous numpy arrays.

Everything here is a pure function returning a fresh buffer; tensors are
plain row-major ndarrays of float32/float64 with rank <= 5 laid out as
(batch, channel, depth, height, width). The 3D convolution is realized as
im2col + BLAS matmul; its hand-written gradients live next to it because
the reverse-mode engine composes per-block VJPs instead of tracing every
primitive.

Set ``DEBUG_CHECK_FINITE = True`` (or env REVDIFF_DEBUG=1) to make each
kernel assert its output is finite given finite inputs.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DomainError, ShapeError

DIV_FLOOR = 1e-12  # denominators below this signal a broken coupling-scale bound
DEBUG_CHECK_FINITE = bool(int(os.environ.get("REVDIFF_DEBUG", "0")))


def _finite(x: np.ndarray, what: str) -> np.ndarray:
    if DEBUG_CHECK_FINITE and not np.isfinite(x).all():
        raise DomainError(f"non-finite values produced by {what}")
    return x


# ---------------------------------------------------------------------------
# elementwise surface


def add(a, b):
    return _finite(np.add(a, b), "add")


def sub(a, b):
    return _finite(np.subtract(a, b), "sub")


def mul(a, b):
    return _finite(np.multiply(a, b), "mul")


def div(a, b):
    """Elementwise division with a hard floor on |denominator|. The floor
    is far below any legal coupling scale, so tripping it is a bug signal,
    not a tolerance issue."""
    b = np.asarray(b)
    if np.any(np.abs(b) < DIV_FLOOR):
        raise DomainError(f"division denominator below floor {DIV_FLOOR:g}")
    return _finite(np.divide(a, b), "div")


def exp(x):
    return _finite(np.exp(x), "exp")


def tanh(x):
    return _finite(np.tanh(x), "tanh")


def sigmoid(x):
    # numerically symmetric form, no overflow for large |x|
    out = np.empty_like(np.asarray(x, dtype=np.result_type(x, np.float32)))
    x = np.asarray(x, dtype=out.dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _finite(out, "sigmoid")


def scale(x, alpha):
    return _finite(np.multiply(x, alpha), "scale")


def silu(x):
    return mul(x, sigmoid(x))


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


# ---------------------------------------------------------------------------
# matmul / softmax


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    return _finite(a @ b, "matmul")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return _finite(e / np.sum(e, axis=axis, keepdims=True), "softmax")


def softmax_vjp(y: np.ndarray, gy: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient through softmax given its output y."""
    return y * (gy - np.sum(y * gy, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# 3D cross-correlation


def _check_conv_args(x, kernel, stride, padding):
    if x.ndim != 5 or kernel.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D x and kernel, got {x.shape}, {kernel.shape}")
    k = kernel.shape[2]
    if kernel.shape[3] != k or kernel.shape[4] != k:
        raise ShapeError(f"conv3d kernel must be cubic, got {kernel.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv3d kernel extent must be odd, got {k}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv3d channel mismatch: x has {x.shape[1]}, kernel expects {kernel.shape[1]}"
        )
    if stride < 1:
        raise ShapeError(f"conv3d stride must be >= 1, got {stride}")
    p = (k - 1) // 2 if padding is None else int(padding)
    for d in x.shape[2:]:
        if d + 2 * p < k:
            raise ShapeError(f"conv3d spatial extent {d} too small for k={k}, padding={p}")
    return k, p


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # [B,C,Dp,Hp,Wp] -> [B,C,D',H',W',k,k,k] view
    w = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return w[:, :, ::stride, ::stride, ::stride]


def conv3d(x, kernel, stride: int = 1, padding: int | None = None, bias=None):
    """Cross-correlation of x[B,C,D,H,W] with kernel[O,C,k,k,k].

    Output spatial extent is floor((D + 2p - k)/stride) + 1; the default
    padding (k-1)/2 with stride 1 preserves the input extent.
    """
    k, p = _check_conv_args(x, kernel, stride, padding)
    B, C = x.shape[:2]
    O = kernel.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    w = _windows(xp, k, stride)
    Do, Ho, Wo = w.shape[2:5]
    col = np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        B * Do * Ho * Wo, C * k * k * k
    )
    y = col @ kernel.reshape(O, -1).T
    y = y.reshape(B, Do, Ho, Wo, O).transpose(0, 4, 1, 2, 3)
    if bias is not None:
        y = y + bias.reshape(1, O, 1, 1, 1)
    return _finite(np.ascontiguousarray(y), "conv3d")


def conv3d_vjp(x, kernel, gy, padding: int | None = None, bias=None):
    """Gradients of stride-1 conv3d. Returns (gx, gkernel, gbias);
    gbias is None when bias is None."""
    k, p = _check_conv_args(x, kernel, 1, padding)
    B, C = x.shape[:2]
    O = kernel.shape[0]
    # kernel gradient: correlate padded input windows with gy
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    w = _windows(xp, k, 1)
    Do, Ho, Wo = gy.shape[2:5]
    col = np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        B * Do * Ho * Wo, C * k * k * k
    )
    gy_mat = np.ascontiguousarray(gy.transpose(0, 2, 3, 4, 1)).reshape(-1, O)
    gk = (gy_mat.T @ col).reshape(kernel.shape)
    # input gradient: full correlation with the flipped, channel-swapped kernel
    kf = np.ascontiguousarray(kernel[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    q = k - 1
    gyp = np.pad(gy, ((0, 0), (0, 0), (q, q), (q, q), (q, q)))
    gx_full = conv3d(gyp, kf, stride=1, padding=0)
    D = x.shape[2]
    gx = gx_full[:, :, p : p + D, p : p + x.shape[3], p : p + x.shape[4]]
    gb = gy.sum(axis=(0, 2, 3, 4)) if bias is not None else None
    return np.ascontiguousarray(gx), gk, gb


def conv3d_flops(x_shape, kernel_shape, out_shape) -> int:
    """Analytic multiply-add count (2 flops per MAC) plus bias adds."""
    B = x_shape[0]
    O, C, k = kernel_shape[0], kernel_shape[1], kernel_shape[2]
    vox = int(np.prod(out_shape[2:]))
    return 2 * B * O * C * k**3 * vox + B * O * vox
