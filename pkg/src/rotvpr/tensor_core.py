"""Dense tensor primitives with paired, hand-written backward passes.

Arrays are plain ``numpy.ndarray`` objects in row-major order. Spatial
operations accept either a single image ``[C, H, W]`` or a batch
``[B, C, H, W]``; the batch axis is added and removed transparently.

Every ``op`` has an ``op_backward`` that takes the upstream gradient plus the
forward inputs and returns the gradients of those inputs.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradCheckError(AssertionError):
    """Raised by :func:`grad_check` on non-finite gradients or tolerance failures."""


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ShapeError(f"expected {rank - 1}D or {rank}D input, got shape {x.shape}")
    return x, False


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> None:
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"kernel must be [C_out, C_in, k, k], got {w.shape}")
    if w.shape[2] % 2 == 0:
        raise ShapeError("kernel size must be odd")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    k = w.shape[2]
    if min(conv_output_size(x.shape[2], k, stride, padding),
           conv_output_size(x.shape[3], k, stride, padding)) < 1:
        raise ShapeError("convolution output would be empty")


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xb: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Return columns of shape ``[C*k*k, B*Ho*Wo]`` for a padded batch."""
    win = sliding_window_view(_pad(xb, padding), (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, b * ho * wo)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` with kernels ``w`` of shape ``[C_out, C_in, k, k]``."""
    xb, squeeze = _as_batch(x, 4)
    _check_conv(xb, w, stride, padding)
    k = w.shape[2]
    b = xb.shape[0]
    ho = conv_output_size(xb.shape[2], k, stride, padding)
    wo = conv_output_size(xb.shape[3], k, stride, padding)
    cols = _im2col(xb, k, stride, padding)
    out = (w.reshape(w.shape[0], -1) @ cols).reshape(w.shape[0], b, ho, wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    return out[0] if squeeze else out


def conv2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray,
                    stride: int = 1, padding: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dx, dw)`` for :func:`conv2d`."""
    xb, squeeze = _as_batch(x, 4)
    db, _ = _as_batch(dout, 4)
    co, c, k, _ = w.shape
    b, _, ho, wo = db.shape
    d2 = db.transpose(1, 0, 2, 3).reshape(co, -1)
    cols = _im2col(xb, k, stride, padding)
    dw = (d2 @ cols.T).reshape(w.shape)
    dcols = (w.reshape(co, -1).T @ d2).reshape(c, k, k, b, ho, wo)
    hp, wp = xb.shape[2] + 2 * padding, xb.shape[3] + 2 * padding
    dxp = np.zeros((c, b, hp, wp), dtype=np.result_type(dout, w))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
    dx = np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))
    return (dx[0] if squeeze else dx), dw


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    # gradient is zero at exactly 0
    return dout * (x > 0)


def avg_pool2(x: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 average pooling over the last two axes (even sizes only).

    Unlike a stride-2 convolution, the 2x2 block partition of an even-sized grid
    maps onto itself under quarter turns, so downsampling stays rotation-exact.
    """
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial size, got {(h, w)}")
    v = x.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2))
    return v.mean(axis=(-3, -1))


def avg_pool2_backward(dout: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dout, 2, axis=-2), 2, axis=-1) * 0.25


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input dim {x.shape[-1]} != weight d_in {weight.shape[1]}")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out


def linear_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Return ``(dx, dweight, dbias)``."""
    dx = dout @ weight
    d2 = dout.reshape(-1, dout.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return dx, d2.T @ x2, d2.sum(axis=0)


def _bn_shape(x: np.ndarray, channel_axis: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    axes = tuple(a for a in range(x.ndim) if a != channel_axis)
    shape = [1] * x.ndim
    shape[channel_axis] = x.shape[channel_axis]
    return axes, tuple(shape)


def normalize_batch(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5,
                    training: bool = True, running: dict | None = None,
                    momentum: float = 0.1, channel_axis: int = 1) -> np.ndarray:
    """Batch normalisation with statistics pooled over every axis except the channel.

    For oriented maps ``[B, C, N, H, W]`` this pools over B, N, H, W jointly, so
    the result commutes with any permutation of the orientation axis.

    ``running`` holds ``mean``/``var`` arrays; in training mode they are updated
    in place (callers serialise access), in inference mode they are used.
    """
    axes, shape = _bn_shape(x, channel_axis)
    if training:
        count = x.size // x.shape[channel_axis]
        if count < 2:
            raise ValueError("normalize_batch needs at least 2 values per channel in training mode")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running is not None:
            running["mean"] *= 1 - momentum
            running["mean"] += momentum * mean
            running["var"] *= 1 - momentum
            running["var"] += momentum * var * count / (count - 1)
    else:
        mean, var = running["mean"], running["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    return xhat * gamma.reshape(shape) + beta.reshape(shape)


def normalize_batch_backward(dout: np.ndarray, x: np.ndarray, gamma: np.ndarray,
                             eps: float = 1e-5, training: bool = True,
                             running: dict | None = None, channel_axis: int = 1):
    """Return ``(dx, dgamma, dbeta)`` for :func:`normalize_batch`."""
    axes, shape = _bn_shape(x, channel_axis)
    if training:
        mean, var = x.mean(axis=axes), x.var(axis=axes)
    else:
        mean, var = running["mean"], running["var"]
    inv = (1.0 / np.sqrt(var + eps)).reshape(shape)
    xhat = (x - mean.reshape(shape)) * inv
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    if not training:
        return dxhat * inv, dgamma, dbeta
    m = x.size // x.shape[channel_axis]
    dx = inv / m * (m * dxhat - dxhat.sum(axis=axes).reshape(shape)
                    - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
    return dx, dgamma, dbeta


def grad_check(op_under_test: Callable[[np.ndarray], tuple[float, np.ndarray]],
               point: np.ndarray, step: float = 1e-5,
               tolerance: float | None = None, stencil: int = 3) -> float:
    """Compare an analytic gradient with central finite differences.

    ``op_under_test(x)`` must return ``(scalar_value, analytic_gradient)``.
    Returns the maximum elementwise relative error, using the denominator
    ``max(|a|, |b|, 1e-8)``. Raises :class:`GradCheckError` if any gradient
    entry is non-finite, or if ``tolerance`` is given and exceeded.

    ``stencil=5`` uses the fourth-order central formula, which tolerates a
    larger step and so loses less to round-off on tiny gradient entries.
    """
    if stencil not in (3, 5):
        raise ValueError("stencil must be 3 or 5")
    x = np.array(point, dtype=np.float64)
    _, analytic = op_under_test(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise GradCheckError(f"gradient shape {analytic.shape} != point shape {x.shape}")
    numeric = np.empty_like(x)
    flat = x.reshape(-1)

    def at(i, offset):
        orig = flat[i]
        flat[i] = orig + offset
        value, _ = op_under_test(x.copy())
        flat[i] = orig
        return value

    for i in range(flat.size):
        d1 = at(i, step) - at(i, -step)
        if stencil == 3:
            numeric.reshape(-1)[i] = d1 / (2 * step)
        else:
            d2 = at(i, 2 * step) - at(i, -2 * step)
            numeric.reshape(-1)[i] = (8 * d1 - d2) / (12 * step)
    for name, g in (("analytic", analytic), ("numeric", numeric)):
        bad = np.argwhere(~np.isfinite(g))
        if len(bad):
            raise GradCheckError(f"non-finite {name} gradient at index {tuple(int(i) for i in bad[0])}")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    if tolerance is not None and worst >= tolerance:
        idx = tuple(int(i) for i in np.unravel_index(int(rel.argmax()), rel.shape))
        raise GradCheckError(
            f"relative error {worst:.3e} at index {idx} exceeds {tolerance:.1e} "
            f"(analytic={analytic[idx]:.6e}, numeric={numeric[idx]:.6e})")
    return worst


# -- serialisation ---------------------------------------------------------

TENSOR_MAGIC = b"EPT1"
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    fh.write(struct.pack("<4sBB", TENSOR_MAGIC, tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(6)
    if len(head) < 6:
        raise EOFError("truncated tensor header")
    magic, tag, rank = struct.unpack("<4sBB", head)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    raw = fh.read(4 * rank)
    if len(raw) < 4 * rank:
        raise EOFError("truncated tensor shape")
    shape = struct.unpack(f"<{rank}I", raw)
    dtype = _TAG_DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    data = fh.read(nbytes)
    if len(data) < nbytes:
        raise EOFError("truncated tensor data")
    return np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
