"""Dense numeric kernels: convolution, bilinear resize, sigmoid, pooling.

Tensors are plain ``numpy`` arrays in channels-last layout, ``[h, w, c]`` for
a single map or ``[n, h, w, c]`` for a batch. Kernels follow
``[c_out, c_in, kh, kw]``. Every function is pure and keeps the dtype of its
input (float32 in normal use, float64 for gradient checking).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

POOL_KINDS = ("gap", "gmp", "gwp")


@dataclass(frozen=True)
class PoolingStrategy:
    """Global spatial pooling: average, max, or the weighted mix of both."""

    kind: str = "gwp"
    lam: float = 0.5

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in POOL_KINDS:
            raise ValueError(f"unknown pooling kind {self.kind!r}, expected one of {POOL_KINDS}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"pooling lambda must lie in [0, 1], got {self.lam}")
        object.__setattr__(self, "kind", kind)


def _batched(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected a [h,w,c] or [n,h,w,c] tensor, got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Unfold ``[n,h,w,c]`` into rows of ``kh*kw*c`` patch values.

    Row order is ``(n, y_out, x_out)``; column order is ``(ky, kx, c)``, so the
    matching weight matrix is ``kernel.transpose(0, 2, 3, 1).reshape(c_out, -1)``.
    """
    n, h, w, c = x.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((n, ho, wo, kh * kw, c), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, :, ky * kw + kx] = x[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    return cols.reshape(n * ho * wo, kh * kw * c)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back to ``[n,h,w,c]``."""
    n, h, w, c = x_shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(n, ho, wo, kh * kw, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += cols[:, :, :, ky * kw + kx]
    if padding:
        out = out[:, padding:padding + h, padding:padding + w, :]
    return out


def im2col_cf(x: np.ndarray) -> np.ndarray:
    """3x3, stride 1, pad 1 unfold of a channels-first ``[c,n,h,w]`` tensor.

    Returns ``[9*c, n*h*w]`` with row order ``(ky, kx, c)``, so
    ``kernel_matrix(k) @ cols`` is the convolution in ``[c_out, n*h*w]`` layout.
    """
    c, n, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((3, 3, c, n, h, w), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[ky, kx] = xp[:, :, ky:ky + h, kx:kx + w]
    return cols.reshape(9 * c, n * h * w)


def col2im_cf(cols: np.ndarray, x_shape) -> np.ndarray:
    """Adjoint of :func:`im2col_cf`: scatter ``[9*c, n*h*w]`` back to ``[c,n,h,w]``."""
    c, n, h, w = x_shape
    cols = cols.reshape(3, 3, c, n, h, w)
    out = np.zeros((c, n, h + 2, w + 2), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            out[:, :, ky:ky + h, kx:kx + w] += cols[ky, kx]
    return out[:, :, 1:h + 1, 1:w + 1]


def kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """``[c_out, c_in, kh, kw]`` to the ``[c_out, kh*kw*c_in]`` layout used by :func:`im2col`."""
    return kernel.transpose(0, 2, 3, 1).reshape(kernel.shape[0], -1)


def kernel_from_matrix(mat: np.ndarray, shape) -> np.ndarray:
    c_out, c_in, kh, kw = shape
    return mat.reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """2-D cross-correlation with zero padding.

    Parameters
    ----------
    x : array, shape ``[h, w, c_in]`` or ``[n, h, w, c_in]``
    kernel : array, shape ``[c_out, c_in, kh, kw]``
    bias : array, shape ``[c_out]``
    stride, padding : int

    Returns
    -------
    array, shape ``[h_out, w_out, c_out]`` (or batched), where
    ``h_out = (h + 2*padding - kh) // stride + 1``.
    """
    xb, single = _batched(x)
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be [c_out,c_in,kh,kw], got shape {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    n, h, w, c = xb.shape
    if c != c_in:
        raise ValueError(f"input has {c} channels but kernel expects {c_in} (kernel shape {kernel.shape})")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} does not match c_out={c_out}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    cols = im2col(xb, kh, kw, stride, padding)
    out = cols @ kernel_matrix(kernel).T
    out += bias
    out = out.reshape(n, ho, wo, c_out)
    return out[0] if single else out


def _resize_axis(in_size: int, out_size: int):
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and border clamping.

    Source coordinate for output index ``d`` is ``(d + 0.5) * in/out - 0.5``,
    clamped to ``[0, in - 1]``. Works on ``[h,w,c]`` or ``[n,h,w,c]``; an
    output size equal to the input size returns an exact copy.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    xb, single = _batched(x)
    h, w = xb.shape[1:3]
    if (h, w) == (out_h, out_w):
        out = xb.copy()
        return out[0] if single else out
    y0, y1, fy = _resize_axis(h, out_h)
    x0, x1, fx = _resize_axis(w, out_w)
    fy = fy.astype(xb.dtype)[None, :, None, None]
    fx = fx.astype(xb.dtype)[None, None, :, None]
    rows0 = xb[:, y0]
    rows1 = xb[:, y1]
    top = rows0[:, :, x0] * (1 - fx) + rows0[:, :, x1] * fx
    bot = rows1[:, :, x0] * (1 - fx) + rows1[:, :, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out[0] if single else out


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def _windows(x: np.ndarray, channels_first: bool):
    if channels_first:
        return (x[..., 0::2, 0::2], x[..., 0::2, 1::2], x[..., 1::2, 0::2], x[..., 1::2, 1::2])
    return (x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2])


def maxpool2x2(x: np.ndarray, channels_first: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling, stride 2, on ``[n,h,w,c]`` with even ``h, w``.

    With ``channels_first`` the spatial axes are the last two (``[c,n,h,w]``).
    Returns the pooled tensor and the window slot (0..3, row-major) holding
    the maximum; ties resolve to the first slot.
    """
    q = _windows(x, channels_first)
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    idx = np.full(out.shape, 3, dtype=np.int8)
    for k in (2, 1, 0):
        idx[q[k] == out] = k
    return out, idx


def maxpool2x2_backward(grad: np.ndarray, idx: np.ndarray, channels_first: bool = False) -> np.ndarray:
    shape = list(grad.shape)
    ax = (-2, -1) if channels_first else (1, 2)
    for a in ax:
        shape[a] *= 2
    out = np.zeros(shape, dtype=grad.dtype)
    for k, view in enumerate(_windows(out, channels_first)):
        view[...] = np.where(idx == k, grad, 0)
    return out


def spatial_pool(a: np.ndarray, strategy: PoolingStrategy) -> np.ndarray:
    """Pool ``[h,w,d]`` (or ``[n,h,w,d]``) over space into ``[d]`` (or ``[n,d]``).

    GAP is the per-channel mean, GMP the per-channel max and GWP the convex mix
    ``lam * GAP + (1 - lam) * GMP``.
    """
    ab, single = _batched(a)
    if strategy.kind == "gap":
        f = ab.mean(axis=(1, 2))
    elif strategy.kind == "gmp":
        f = ab.max(axis=(1, 2))
    else:
        lam = strategy.lam
        # exact endpoints: lam == 1 must reproduce GAP bit for bit, lam == 0 GMP
        if lam == 1.0:
            f = ab.mean(axis=(1, 2))
        elif lam == 0.0:
            f = ab.max(axis=(1, 2))
        else:
            f = lam * ab.mean(axis=(1, 2)) + (1 - lam) * ab.max(axis=(1, 2))
    f = f.astype(ab.dtype, copy=False)
    return f[0] if single else f


def spatial_pool_backward(grad_f: np.ndarray, a: np.ndarray, strategy: PoolingStrategy) -> np.ndarray:
    """Gradient of :func:`spatial_pool` w.r.t. its batched input ``[n,h,w,d]``.

    The max branch routes the whole gradient to the first maximal location.
    """
    n, h, w, d = a.shape
    lam = {"gap": 1.0, "gmp": 0.0}.get(strategy.kind, strategy.lam)
    out = np.zeros_like(a)
    if lam > 0:
        out += (lam / (h * w)) * grad_f[:, None, None, :]
    if lam < 1:
        flat = a.reshape(n, h * w, d)
        idx = flat.argmax(axis=1)
        gm = np.zeros_like(flat)
        np.put_along_axis(gm, idx[:, None, :], ((1 - lam) * grad_f)[:, None, :], axis=1)
        out += gm.reshape(n, h, w, d)
    return out
