"""Dense-array helpers shared by every other module.

Arrays are plain ``numpy.float64`` arrays in row-major order with the
channel axis last (``h x w x c``). Random streams come from numpy's PCG64
seeded through ``SeedSequence`` so that every consumer (scene generation,
fragmentation, augmentation, shuffling, initialization) draws from its own
independent sub-stream of the master seed.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateVector, NonFiniteLoss, ShapeMismatch

EPS_NORM = 1e-12

# Sub-stream identifiers for ``substream``.
STREAM_INIT = 1
STREAM_SCENE = 2
STREAM_FRAGMENT = 3
STREAM_AUGMENT = 4
STREAM_SHUFFLE = 5
STREAM_KMEANS = 6


def substream(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 generator for the sub-stream ``keys`` of the 64-bit master ``seed``."""
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def l2_normalize(v, eps: float = EPS_NORM) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if not n > eps:
        raise DegenerateVector(f"vector norm {n:.3g} <= {eps:g}")
    return v / n


def normalize_rows(x: np.ndarray, eps: float = EPS_NORM) -> tuple[np.ndarray, np.ndarray]:
    """Normalize the last axis; returns ``(unit, norms)`` with norms keeping dims."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(~(norms > eps)):
        raise DegenerateVector(f"{int(np.sum(~(norms > eps)))} vectors with norm <= {eps:g}")
    return x / norms, norms


def normalize_rows_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Backward of ``normalize_rows``: project out the radial component."""
    radial = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - unit * radial) / norms


def cosine_similarity(a, b) -> float:
    return float(np.dot(l2_normalize(a), l2_normalize(b)))


def interp_matrix(n: int, factor: int) -> np.ndarray:
    """``(n*factor) x n`` linear interpolation matrix, half-pixel centers.

    Matches the align-corners=false convention: output index ``o`` samples
    source coordinate ``(o + 0.5) / factor - 0.5``, clamped at the borders.
    """
    out = n * factor
    A = np.zeros((out, n))
    src = (np.arange(out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    rows = np.arange(out)
    np.add.at(A, (rows, i0), 1.0 - frac)
    np.add.at(A, (rows, i1), frac)
    return A


def _check_grid(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 1:
        raise ShapeMismatch(f"expected a non-empty h x w x c grid, got shape {grid.shape}")
    return grid


def bilinear_upsample(grid, factor: int) -> np.ndarray:
    grid = _check_grid(grid)
    if int(factor) < 1:
        raise ShapeMismatch(f"upsample factor must be a positive integer, got {factor}")
    h, w, _ = grid.shape
    Ah = interp_matrix(h, factor)
    Aw = interp_matrix(w, factor)
    return np.einsum("Yy,yxc,Xx->YXc", Ah, grid, Aw, optimize=True)


def bilinear_upsample_backward(grad, factor: int) -> np.ndarray:
    grad = _check_grid(grad)
    H, W, _ = grad.shape
    if H % factor or W % factor:
        raise ShapeMismatch(f"gradient shape {grad.shape} is not a multiple of factor {factor}")
    Ah = interp_matrix(H // factor, factor)
    Aw = interp_matrix(W // factor, factor)
    return np.einsum("Yy,YXc,Xx->yxc", Ah, grad, Aw, optimize=True)


def area_downsample(x, out_h: int, out_w: int) -> np.ndarray:
    """Box-filter the two leading spatial axes of ``x`` down to ``out_h x out_w``.

    Works on ``H x W`` and ``H x W x c`` arrays and on stacks ``N x H x W``
    when called through ``area_downsample_stack``.
    """
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[:2]
    if H % out_h or W % out_w:
        raise ShapeMismatch(f"cannot area-downsample {H}x{W} to {out_h}x{out_w}")
    fy, fx = H // out_h, W // out_w
    return x.reshape(out_h, fy, out_w, fx, *x.shape[2:]).mean(axis=(1, 3))


def area_downsample_stack(masks, out_h: int, out_w: int) -> np.ndarray:
    """Box-filter a stack of ``N x H x W`` maps to ``N x out_h x out_w``."""
    masks = np.asarray(masks, dtype=np.float64)
    N, H, W = masks.shape
    if H % out_h or W % out_w:
        raise ShapeMismatch(f"cannot area-downsample {H}x{W} to {out_h}x{out_w}")
    fy, fx = H // out_h, W // out_w
    return masks.reshape(N, out_h, fy, out_w, fx).mean(axis=(2, 4))


def finite_difference_gradient(loss_fn: Callable[[np.ndarray], float], params, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat parameter vector."""
    if not h > 0:
        raise ValueError("step h must be positive")
    p = np.array(params, dtype=np.float64).ravel()
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        fp = float(loss_fn(p.copy()))
        p[i] = orig - h
        fm = float(loss_fn(p.copy()))
        p[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteLoss(f"non-finite loss probing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``."""
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom
