"""Spatial pooling of ``[C, H, W]`` maps into descriptors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GemParams:
    p: float = 3.0
    eps: float = 1e-6


def gem_pool(x: np.ndarray, p: float = 3.0, eps: float = 1e-6) -> np.ndarray:
    """Generalized mean over the last two axes of eps-clamped activations.

    ``p = 1`` is average pooling; large ``p`` approaches max pooling.
    """
    xc = np.maximum(x, eps)
    m = np.mean(xc ** p, axis=(-2, -1))
    return m ** (1.0 / p)


def gem_pool_backward(dout: np.ndarray, x: np.ndarray, p: float = 3.0,
                      eps: float = 1e-6) -> tuple[np.ndarray, float]:
    """Return ``(dx, dp)`` for :func:`gem_pool`."""
    xc = np.maximum(x, eps)
    hw = x.shape[-2] * x.shape[-1]
    xp = xc ** p
    m = xp.mean(axis=(-2, -1))
    f = m ** (1.0 / p)
    # df/dx = m^(1/p - 1) x^(p-1) / HW, zero where clamped
    scale = (dout * m ** (1.0 / p - 1.0) / hw)[..., None, None]
    dx = scale * xc ** (p - 1) * (x > eps)
    mlog = (xp * np.log(xc)).mean(axis=(-2, -1))
    dfdp = f * (-np.log(m) / p ** 2 + mlog / (p * m))
    return dx, float(np.sum(dout * dfdp))


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot L2-normalize a zero vector")
    return v / norm


def l2_normalize_backward(dout: np.ndarray, v: np.ndarray, axis: int = -1) -> np.ndarray:
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    y = v / norm
    return (dout - y * np.sum(dout * y, axis=axis, keepdims=True)) / norm


def reduce_dim(descriptor: np.ndarray, target_dim: int, mode: str = "truncate_renorm") -> np.ndarray:
    """Keep the first ``target_dim`` coordinates and re-normalize.

    This is a post-hoc approximation of retraining at a smaller output size.
    Works on a single vector or on rows of a matrix.
    """
    if mode != "truncate_renorm":
        raise ValueError(f"unknown reduction mode {mode!r}")
    if target_dim < 1:
        raise ValueError("target_dim must be >= 1")
    if target_dim > descriptor.shape[-1]:
        raise ValueError(f"target_dim {target_dim} exceeds descriptor dim {descriptor.shape[-1]}")
    return l2_normalize(descriptor[..., :target_dim])
