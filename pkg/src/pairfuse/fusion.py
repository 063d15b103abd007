"""The 13 fusion functions: shape-preserving binary ops on equal-shaped tensors.

Each function combines two rank-4 feature tensors (N, C, H, W) into one of
identical shape. Functions 1-3, 5-9, 11-13 act elementwise (reductions are
taken over a stacked length-2 axis); functions 4 and 10 are per-(batch,
channel) matrix products over the (H, W) slices and therefore need H == W.

    id  operation
    1   a * b
    2   |a - b|
    3   sqrt(|a^2 - b^2|)          (radicand clamped via abs to stay real)
    4   a @ b                      (per-slice matrix product)
    5   a + b
    6   (a + b) / 2                (mean over the stacked axis)
    7   max(a, b)
    8   min(a, b)
    9   |a^2 * b^2|
    10  a @ b.T                    (per-slice product with transposed slice)
    11  |a - b| / sqrt(2)          (sample std over the stacked axis, ddof=1)
    12  sqrt(a^2 + b^2)            (norm along the stacked axis)
    13  (a - b)^2 / 2              (sample variance over the stacked axis)

All kernels are pure: inputs are never mutated, outputs are fresh arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteInput, NonSquareSpatial, ShapeMismatch

ALL_FIDS = tuple(range(1, 14))
SQUARE_SPATIAL_FIDS = frozenset({4, 10})
COMMUTATIVE_FIDS = frozenset({1, 2, 5, 6, 7, 8, 9, 11, 12, 13})

# Backward-pass clamp for sqrt kernels; keeps the derivative finite at a
# vanishing radicand without touching the forward value.
_SQRT_GRAD_EPS = 1e-12

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class FuseGradPair:
    """Gradients of a fused output w.r.t. both inputs."""

    grad_a: np.ndarray
    grad_b: np.ndarray


def _check_fid(fid: int) -> None:
    if fid not in ALL_FIDS:
        raise ValueError(f"unknown fuse function id {fid!r}; expected 1..13")


def validate_shapes(fid: int, shape_a, shape_b) -> str | None:
    """Report whether fuse_forward would accept the shapes, without computing.

    Returns None when acceptable, otherwise a short error description
    beginning with the error name.
    """
    _check_fid(fid)
    shape_a = tuple(shape_a)
    shape_b = tuple(shape_b)
    if len(shape_a) != 4 or len(shape_b) != 4:
        return f"ShapeMismatch: tensors must be rank 4, got {shape_a} and {shape_b}"
    if shape_a != shape_b:
        return f"ShapeMismatch: {shape_a} != {shape_b}"
    if fid in SQUARE_SPATIAL_FIDS and shape_a[2] != shape_a[3]:
        return (
            f"NonSquareSpatial: fuse function {fid} needs H == W, "
            f"got H={shape_a[2]} W={shape_a[3]}"
        )
    return None


def _check_inputs(fid: int, a: np.ndarray, b: np.ndarray) -> None:
    msg = validate_shapes(fid, a.shape, b.shape)
    if msg is not None:
        if msg.startswith("NonSquareSpatial"):
            raise NonSquareSpatial(msg)
        raise ShapeMismatch(msg)
    if not np.isfinite(a).all() or not np.isfinite(b).all():
        raise NonFiniteInput(f"non-finite values in inputs to fuse function {fid}")


def fuse_forward(fid: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Apply fusion function `fid` to equal-shaped rank-4 tensors."""
    _check_inputs(fid, a, b)
    if fid == 1:
        return a * b
    if fid == 2:
        return np.abs(a - b)
    if fid == 3:
        return np.sqrt(np.abs(a * a - b * b))
    if fid == 4:
        return np.matmul(a, b)
    if fid == 5:
        return a + b
    if fid == 6:
        return (a + b) / 2.0
    if fid == 7:
        return np.maximum(a, b)
    if fid == 8:
        return np.minimum(a, b)
    if fid == 9:
        return np.abs((a * a) * (b * b))
    if fid == 10:
        return np.matmul(a, np.swapaxes(b, -1, -2))
    if fid == 11:
        return np.abs(a - b) / _SQRT2
    if fid == 12:
        return np.sqrt(a * a + b * b)
    if fid == 13:
        return (a - b) ** 2 / 2.0
    raise AssertionError("unreachable")


def fuse_backward(fid: int, a: np.ndarray, b: np.ndarray, upstream: np.ndarray) -> FuseGradPair:
    """Gradients of `upstream . fuse_forward(fid, a, b)` w.r.t. a and b.

    Subgradient conventions at non-differentiable points: sign(0) = 0 for the
    abs-based functions 2 and 11; max/min ties route the full gradient to
    input a; the sqrt derivative of functions 3 and 12 is clamped by adding
    a small epsilon under the root.
    """
    _check_inputs(fid, a, b)
    if upstream.shape != a.shape:
        raise ShapeMismatch(
            f"upstream shape {upstream.shape} != input shape {a.shape}"
        )
    if not np.isfinite(upstream).all():
        raise NonFiniteInput("non-finite values in upstream gradient")
    g = upstream
    if fid == 1:
        return FuseGradPair(g * b, g * a)
    if fid == 2:
        s = np.sign(a - b)
        return FuseGradPair(g * s, -g * s)
    if fid == 3:
        u = a * a - b * b
        d = np.sign(u) / np.sqrt(np.abs(u) + _SQRT_GRAD_EPS)
        return FuseGradPair(g * d * a, -g * d * b)
    if fid == 4:
        bt = np.swapaxes(b, -1, -2)
        at = np.swapaxes(a, -1, -2)
        return FuseGradPair(np.matmul(g, bt), np.matmul(at, g))
    if fid == 5:
        return FuseGradPair(g.copy(), g.copy())
    if fid == 6:
        return FuseGradPair(g / 2.0, g / 2.0)
    if fid == 7:
        take_a = a >= b
        return FuseGradPair(g * take_a, g * ~take_a)
    if fid == 8:
        take_a = a <= b
        return FuseGradPair(g * take_a, g * ~take_a)
    if fid == 9:
        return FuseGradPair(g * 2.0 * a * b * b, g * 2.0 * b * a * a)
    if fid == 10:
        gt = np.swapaxes(g, -1, -2)
        return FuseGradPair(np.matmul(g, b), np.matmul(gt, a))
    if fid == 11:
        s = np.sign(a - b) / _SQRT2
        return FuseGradPair(g * s, -g * s)
    if fid == 12:
        d = np.sqrt(a * a + b * b + _SQRT_GRAD_EPS)
        return FuseGradPair(g * a / d, g * b / d)
    if fid == 13:
        diff = a - b
        return FuseGradPair(g * diff, -g * diff)
    raise AssertionError("unreachable")


def fuse_oracle(fid: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Scalar-loop reference for fuse_forward; kept naive on purpose.

    Elementwise functions loop over every index; functions 4 and 10 use a
    triple-loop matrix product per (batch, channel) slice. Test-only.
    """
    _check_inputs(fid, a, b)
    n, c, h, w = a.shape
    out = np.zeros_like(a)
    if fid in SQUARE_SPATIAL_FIDS:
        for ni in range(n):
            for ci in range(c):
                for i in range(h):
                    for j in range(w):
                        acc = 0.0
                        for k in range(w):
                            if fid == 4:
                                acc += a[ni, ci, i, k] * b[ni, ci, k, j]
                            else:
                                acc += a[ni, ci, i, k] * b[ni, ci, j, k]
                        out[ni, ci, i, j] = acc
        return out
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    x = float(a[ni, ci, i, j])
                    y = float(b[ni, ci, i, j])
                    out[ni, ci, i, j] = _scalar_fuse(fid, x, y)
    return out


def _scalar_fuse(fid: int, x: float, y: float) -> float:
    if fid == 1:
        return x * y
    if fid == 2:
        return abs(x - y)
    if fid == 3:
        return math.sqrt(abs(x * x - y * y))
    if fid == 5:
        return x + y
    if fid == 6:
        return (x + y) / 2.0
    if fid == 7:
        return max(x, y)
    if fid == 8:
        return min(x, y)
    if fid == 9:
        return abs(x * x * y * y)
    if fid == 11:
        # sample std of the two stacked values, ddof=1
        m = (x + y) / 2.0
        return math.sqrt((x - m) ** 2 + (y - m) ** 2)
    if fid == 12:
        return math.hypot(x, y)
    if fid == 13:
        m = (x + y) / 2.0
        return (x - m) ** 2 + (y - m) ** 2
    raise ValueError(f"no scalar form for fuse function {fid}")
