"""im2col / col2im convolution kernels for square kernels.

The ``*_cm`` kernels work on channel-major activations (C, B, H, W): the GEMM
``W (O, C k k) @ cols (C k k, B Ho Wo)`` then yields the output already in
channel-major order, and 1x1 convolutions are plain matrix products with no
copies. The network engine keeps activations in this layout internally. The
unsuffixed functions take and return the usual (B, C, H, W) layout.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    c, b, h, w = x.shape
    out = np.zeros((c, b, h + 2 * padding, w + 2 * padding))
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def im2col_cm(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Patches of channel-major ``x`` as a (C*k*k, B*Ho*Wo) matrix."""
    c, b, h, w = x.shape
    ho, wo = out_size(h, k, stride, padding), out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} with padding {padding} does not fit spatial size {(h, w)}")
    xp = _pad(x, padding)
    cols = np.empty((c, k, k, b, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, b * ho * wo)


def col2im_cm(cols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col_cm`: scatter-add patch gradients to (C, B, H, W)."""
    c, b, h, w = x_shape
    ho, wo = out_size(h, k, stride, padding), out_size(w, k, stride, padding)
    cols = cols.reshape(c, k, k, b, ho, wo)
    dx = np.zeros((c, b, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    if padding:
        dx = np.ascontiguousarray(dx[:, :, padding:-padding, padding:-padding])
    return dx


def _check(x: np.ndarray, w: np.ndarray) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv expects 4-D input and weight, got {x.shape} and {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"only square kernels are supported, got {w.shape}")


def conv2d_cm(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0,
              bias: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Channel-major convolution. Returns ``(out (O,B,Ho,Wo), cols)``."""
    _check(x, w)
    o, c, k, _ = w.shape
    if x.shape[0] != c:
        raise ShapeError(f"input has {x.shape[0]} channels, weight {w.shape} expects {c}")
    _, b, h, wd = x.shape
    ho, wo = out_size(h, k, stride, padding), out_size(wd, k, stride, padding)
    cols = im2col_cm(x, k, stride, padding)
    out = w.reshape(o, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    return out.reshape(o, b, ho, wo), cols


def input_grad_cm(dout: np.ndarray, x_shape: tuple, w: np.ndarray, stride: int,
                  padding: int) -> np.ndarray:
    """Gradient of :func:`conv2d_cm` w.r.t. its input only."""
    o = w.shape[0]
    dcols = w.reshape(o, -1).T @ dout.reshape(o, -1)
    return col2im_cm(dcols, x_shape, w.shape[2], stride, padding)


def conv2d_cm_backward(dout: np.ndarray, cols: np.ndarray, x_shape: tuple, w: np.ndarray,
                       stride: int, padding: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradients ``(dx, dw)`` of :func:`conv2d_cm`."""
    o = w.shape[0]
    dmat = dout.reshape(o, -1)
    dw = (dmat @ cols.T).reshape(w.shape)
    dcols = w.reshape(o, -1).T @ dmat
    return col2im_cm(dcols, x_shape, w.shape[2], stride, padding), dw


def channel_mix_cm(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """1x1 convolution on channel-major ``x``: one GEMM, no copies."""
    c = x.shape[0]
    if m.shape[1] != c:
        raise ShapeError(f"channel mixer {m.shape} does not match {c} input channels")
    return (m @ x.reshape(c, -1)).reshape((m.shape[0],) + x.shape[1:])


def to_cm(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


to_nchw = to_cm  # swapping the two leading axes is its own inverse


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0,
           bias: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation of ``x`` (B,C,H,W) with ``w`` (O,C,k,k)."""
    _check(x, w)
    out, _ = conv2d_cm(to_cm(x), w, stride, padding, bias)
    return to_nchw(out)


def channel_mix(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """1x1 convolution on (B,C,H,W): ``y[b,o] = sum_c m[o,c] x[b,c]``."""
    return to_nchw(channel_mix_cm(to_cm(x), m))
