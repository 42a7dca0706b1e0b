"""Cyclic-group steerable convolutions on regular-representation features.

Oriented feature maps carry an explicit orientation axis of size ``N`` just
before the spatial axes: ``[C, N, H, W]`` (or ``[B, C, N, H, W]``). The group
element ``r^s`` acts on such a map by rotating every spatial slice by
``s * 2*pi/N`` counterclockwise and rolling the orientation axis by ``s``.

Kernel rotation is represented as a linear operator on the flattened ``k*k``
taps, so the backward pass through any rotated-kernel layer is just the
transposed operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc

SUPPORTED_ORDERS = (1, 4, 8)


@dataclass(frozen=True)
class GroupSpec:
    """The cyclic rotation group C_N with N in {1, 4, 8}."""

    order: int
    angles: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if self.order not in SUPPORTED_ORDERS:
            raise ValueError(f"group order must be one of {SUPPORTED_ORDERS}, got {self.order}")
        object.__setattr__(self, "angles",
                           tuple(2 * math.pi * n / self.order for n in range(self.order)))

    def index_of(self, angle: float) -> int:
        """Return n with angles[n] == angle (mod 2*pi); raise if it is not a group angle."""
        a = angle % (2 * math.pi)
        for n, t in enumerate(self.angles):
            d = abs(a - t)
            if min(d, 2 * math.pi - d) < 1e-9:
                return n
        raise ValueError(f"angle {angle!r} is not an element of C{self.order}")


# -- spatial rotation --------------------------------------------------------

def _rotation_source(h: int, w: int, angle: float, cy: float, cx: float):
    """Source coordinates (rows, cols) for a counterclockwise rotation by ``angle``."""
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
    dy, dx = rows - cy, cols - cx
    c, s = math.cos(angle), math.sin(angle)
    return cy + dx * s + dy * c, cx + dx * c - dy * s


def bilinear_sample(img: np.ndarray, sr: np.ndarray, sc: np.ndarray) -> np.ndarray:
    """Bilinearly sample the last two axes of ``img`` at (sr, sc); zero outside the grid."""
    h, w = img.shape[-2:]
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr, fc = sr - r0, sc - c0
    out = np.zeros(img.shape[:-2] + sr.shape, dtype=np.result_type(img, np.float64))
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            wgt = np.where(ok, wr * wc, 0.0)
            out += img[..., np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)] * wgt
    return out.astype(img.dtype, copy=False)


def quarter_turns(angle: float) -> int | None:
    """Return k if ``angle`` is k quarter turns (mod 4), else None."""
    q = angle / (math.pi / 2)
    k = round(q)
    return k % 4 if abs(q - k) < 1e-12 else None


def rotate_spatial(x: np.ndarray, angle: float) -> np.ndarray:
    """Rotate the last two axes counterclockwise about the array centre.

    Quarter turns are exact index permutations; other angles use bilinear
    resampling with zeros outside the grid.
    """
    k = quarter_turns(angle)
    if k is not None:
        return np.ascontiguousarray(np.rot90(x, k, axes=(-2, -1)))
    h, w = x.shape[-2:]
    sr, sc = _rotation_source(h, w, angle, (h - 1) / 2, (w - 1) / 2)
    return bilinear_sample(x, sr, sc)


def disk_mask(k: int) -> np.ndarray:
    """Taps of a k x k grid whose centres lie in the inscribed disk of radius k/2."""
    c = (k - 1) / 2
    r, q = np.meshgrid(np.arange(k) - c, np.arange(k) - c, indexing="ij")
    return (r * r + q * q) <= (k / 2) ** 2


@lru_cache(maxsize=None)
def rotation_operators(k: int, order: int) -> np.ndarray:
    """Stack of ``[N, k*k, k*k]`` matrices M_n with vec(R_n K) = M_n @ vec(K).

    For N in {1, 4} these are permutations. For N = 8 the base kernel is
    disk-masked, odd orientations apply one bilinear 45 degree step, and the
    rest of the rotation is exact quarter turns; the result is masked again.
    """
    eye = np.eye(k * k).reshape(k * k, k, k)
    ops = np.empty((order, k * k, k * k))
    if order == 8:
        mask = disk_mask(k).astype(np.float64)
        step = rotate_spatial(eye * mask, math.pi / 4) * mask
    for n in range(order):
        if order == 8:
            basis = step if n % 2 else eye * mask
            rotated = np.rot90(basis, n // 2, axes=(1, 2))
        else:
            rotated = np.rot90(eye, n * 4 // order, axes=(1, 2))
        ops[n] = rotated.reshape(k * k, k * k).T
    ops.setflags(write=False)
    return ops


def rotate_kernel(kernel: np.ndarray, angle: float, group: GroupSpec) -> np.ndarray:
    """Rotate the trailing k x k taps of ``kernel`` by a group angle (counterclockwise)."""
    k = kernel.shape[-1]
    if kernel.shape[-2] != k or k % 2 == 0:
        raise tc.ShapeError(f"kernel taps must be odd and square, got {kernel.shape[-2:]}")
    n = group.index_of(angle)
    if group.order != 8:
        return np.ascontiguousarray(np.rot90(kernel, n * 4 // group.order, axes=(-2, -1)))
    m = rotation_operators(k, 8)[n]
    flat = kernel.reshape(-1, k * k) @ m.T
    return flat.reshape(kernel.shape).astype(kernel.dtype, copy=False)


# -- steerable synthesis -----------------------------------------------------

@dataclass
class SteerableKernelBank:
    """Basis kernels ``psi_q`` ``[Q, C_out, C_in, k, k]`` and coefficients ``[N, Q]``.

    The kernel at orientation n is ``sum_q coefficients[n, q] * basis[q]``.
    """

    basis: np.ndarray
    coefficients: np.ndarray
    group: GroupSpec

    def __post_init__(self):
        if self.basis.ndim != 5:
            raise tc.ShapeError(f"basis must be [Q, C_out, C_in, k, k], got {self.basis.shape}")
        if self.coefficients.shape != (self.group.order, self.basis.shape[0]):
            raise tc.ShapeError(
                f"coefficients must be [N={self.group.order}, Q={self.basis.shape[0]}], "
                f"got {self.coefficients.shape}")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("coefficients must be finite")

    @classmethod
    def from_rotated_copies(cls, kernel: np.ndarray, group: GroupSpec) -> "SteerableKernelBank":
        """Q = N basis of rotated copies with indicator interpolation functions."""
        basis = np.stack([rotate_kernel(kernel, a, group) for a in group.angles])
        return cls(basis, np.eye(group.order, dtype=kernel.dtype), group)


def synthesize_steerable(bank: SteerableKernelBank, orientation_index: int) -> np.ndarray:
    if not 0 <= orientation_index < bank.group.order:
        raise IndexError(f"orientation index {orientation_index} out of range")
    return np.tensordot(bank.coefficients[orientation_index], bank.basis, axes=1)


# -- lifting and group convolutions -------------------------------------------

def _rotated_stack(kernel: np.ndarray, group: GroupSpec) -> np.ndarray:
    """``[N, *kernel.shape]`` with every group rotation of ``kernel`` applied."""
    k = kernel.shape[-1]
    ops = rotation_operators(k, group.order)
    flat = kernel.reshape(-1, k * k)
    out = np.einsum("nqp,ap->naq", ops, flat, optimize=True)
    return out.reshape((group.order,) + kernel.shape).astype(kernel.dtype, copy=False)


def _unrotate_stack(dstack: np.ndarray, group: GroupSpec) -> np.ndarray:
    """Adjoint of :func:`_rotated_stack`: sum_n R_n^T dstack[n]."""
    k = dstack.shape[-1]
    ops = rotation_operators(k, group.order)
    flat = dstack.reshape(group.order, -1, k * k)
    out = np.einsum("nqp,naq->ap", ops, flat, optimize=True)
    return out.reshape(dstack.shape[1:]).astype(dstack.dtype, copy=False)


def lift_weight(kernel: np.ndarray, group: GroupSpec) -> np.ndarray:
    """Expand ``[C_out, C_in, k, k]`` into the ``[C_out*N, C_in, k, k]`` planar kernel."""
    co, ci, k, _ = kernel.shape
    stack = _rotated_stack(kernel, group)              # [N, Co, Ci, k, k]
    return np.ascontiguousarray(stack.transpose(1, 0, 2, 3, 4)).reshape(co * group.order, ci, k, k)


def lift_conv(image: np.ndarray, kernel, group: GroupSpec, stride: int = 1,
              padding: int = 0) -> np.ndarray:
    """Lift a planar image to an oriented map: out[:, n] = conv2d(image, R_n kernel).

    ``kernel`` is either a base kernel ``[C_out, C_in, k, k]`` or a
    :class:`SteerableKernelBank` whose synthesized kernels are used directly.
    """
    if isinstance(kernel, SteerableKernelBank):
        if kernel.group != group:
            raise ValueError("kernel bank group does not match")
        w = np.stack([synthesize_steerable(kernel, n) for n in range(group.order)], axis=1)
        w = w.reshape((-1,) + w.shape[2:])
    else:
        w = lift_weight(kernel, group)
    xb, squeeze = tc._as_batch(image, 4)
    out = tc.conv2d(xb, w, stride, padding)
    out = out.reshape(out.shape[0], -1, group.order, *out.shape[2:])
    return out[0] if squeeze else out


def lift_conv_backward(dout: np.ndarray, image: np.ndarray, kernel: np.ndarray,
                       group: GroupSpec, stride: int = 1, padding: int = 0):
    """Return ``(d_image, d_kernel)`` for :func:`lift_conv` with a base kernel."""
    db, _ = tc._as_batch(dout, 5)
    w = lift_weight(kernel, group)
    dx, dw = tc.conv2d_backward(db.reshape(db.shape[0], -1, *db.shape[3:]), image, w,
                                stride, padding)
    co = kernel.shape[0]
    dstack = dw.reshape(co, group.order, *kernel.shape[1:]).transpose(1, 0, 2, 3, 4)
    return dx, _unrotate_stack(dstack, group)


def group_weight(kernel: np.ndarray, group: GroupSpec) -> np.ndarray:
    """Expand ``[C_out, C_in, N, k, k]`` into the planar ``[C_out*N, C_in*N, k, k]`` kernel.

    Block (o, n), (i, m) is R_n applied to kernel[o, i, (m - n) mod N].
    """
    co, ci, N, k, _ = kernel.shape
    if N != group.order:
        raise ValueError(f"kernel orientation axis {N} != group order {group.order}")
    stack = _rotated_stack(kernel, group)               # [n, Co, Ci, r, k, k]
    full = np.empty((co, N, ci, N, k, k), dtype=kernel.dtype)
    for n in range(N):
        full[:, n] = np.roll(stack[n], n, axis=2)
    return full.reshape(co * N, ci * N, k, k)


def _check_oriented(x: np.ndarray, group: GroupSpec) -> np.ndarray:
    xb, _ = tc._as_batch(x, 5)
    if xb.shape[2] != group.order:
        raise ValueError(f"input orientation axis {xb.shape[2]} != group order {group.order}")
    return xb


def group_conv(x: np.ndarray, kernel: np.ndarray, group: GroupSpec, stride: int = 1,
               padding: int = 0) -> np.ndarray:
    """Group convolution on oriented maps ``[B, C_in, N, H, W]`` -> ``[B, C_out, N, H', W']``.

    out[:, n] = sum_m conv2d(x[:, m], R_n kernel[:, :, (m - n) mod N]).
    """
    squeeze = x.ndim == 4
    xb = _check_oriented(x, group)
    b, ci, N, h, w = xb.shape
    out = tc.conv2d(xb.reshape(b, ci * N, h, w), group_weight(kernel, group), stride, padding)
    out = out.reshape(b, -1, N, *out.shape[2:])
    return out[0] if squeeze else out


def group_conv_backward(dout: np.ndarray, x: np.ndarray, kernel: np.ndarray,
                        group: GroupSpec, stride: int = 1, padding: int = 0):
    """Return ``(dx, d_kernel)`` for :func:`group_conv`."""
    squeeze = x.ndim == 4
    xb = _check_oriented(x, group)
    db, _ = tc._as_batch(dout, 5)
    b, ci, N, h, w = xb.shape
    co = kernel.shape[0]
    k = kernel.shape[-1]
    dx, dfull = tc.conv2d_backward(db.reshape(b, co * N, *db.shape[3:]),
                                   xb.reshape(b, ci * N, h, w),
                                   group_weight(kernel, group), stride, padding)
    dfull = dfull.reshape(co, N, ci, N, k, k)
    dstack = np.empty((N, co, ci, N, k, k), dtype=dfull.dtype)
    for n in range(N):
        dstack[n] = np.roll(dfull[:, n], -n, axis=2)
    dk = _unrotate_stack(dstack, group)
    dx = dx.reshape(xb.shape)
    return (dx[0] if squeeze else dx), dk


# -- orientation axis ops -------------------------------------------------------

def cyclic_shift(x: np.ndarray, s: int) -> np.ndarray:
    """Move orientation index n to (n + s) mod N."""
    return np.roll(x, s, axis=-3)


def act(x: np.ndarray, group: GroupSpec, n: int) -> np.ndarray:
    """Apply the group element r^n to an oriented map: rotate spatially, then shift."""
    return cyclic_shift(rotate_spatial(x, group.angles[n]), n)


def orientation_pool(x: np.ndarray, mode: str = "max") -> np.ndarray:
    """Reduce the orientation axis: ``[.., C, N, H, W]`` -> ``[.., C, H, W]``."""
    if mode == "max":
        return x.max(axis=-3)
    if mode == "mean":
        return x.mean(axis=-3)
    raise ValueError(f"unknown orientation pooling mode {mode!r}")


def orientation_pool_backward(dout: np.ndarray, x: np.ndarray, mode: str = "max") -> np.ndarray:
    n = x.shape[-3]
    if mode == "mean":
        return np.repeat(np.expand_dims(dout, -3), n, axis=-3) / n
    # route to the first maximal orientation
    idx = np.expand_dims(x.argmax(axis=-3), -3)
    dx = np.zeros_like(x)
    np.put_along_axis(dx, idx, np.expand_dims(dout, -3), axis=-3)
    return dx


def check_equivariance(layer_stack: Callable[[np.ndarray], np.ndarray] | Sequence[Callable],
                       image: np.ndarray, group: GroupSpec, angle_index: int) -> float:
    """Return ``max |f(g.x) - g.f(x)|`` for g = r^angle_index.

    ``image`` is a planar ``[C, H, W]`` array. The action on the output is
    chosen from its rank: oriented ``[C, N, H, W]`` maps are rotated and
    shifted, planar ``[C, H, W]`` maps are rotated, vectors are left alone.
    """
    stack = list(layer_stack) if isinstance(layer_stack, Sequence) else [layer_stack]

    def f(v):
        for layer in stack:
            v = layer(v)
        return v

    angle = group.angles[angle_index]
    out_rot = f(rotate_spatial(image, angle))
    out = f(image)
    if out.ndim == 4:
        expected = act(out, group, angle_index)
    elif out.ndim == 3:
        expected = rotate_spatial(out, angle)
    else:
        expected = out
    return float(np.max(np.abs(out_rot - expected)))
