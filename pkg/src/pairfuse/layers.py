"""Differentiable building blocks: conv stages, pooling, and the MLP head.

Everything is plain numpy with explicit forward/backward pairs. Forward
functions with a `_cached` suffix return (output, cache); their `*_backward`
counterparts consume the cache and the upstream gradient. Convolutions use
same-padding so spatial size changes only through stride or pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, ShapeMismatch

POOL_KINDS = ("none", "avg2", "max2")


@dataclass(frozen=True)
class StageSpec:
    """One feature-extraction stage: conv (same padding) + ReLU + optional pool."""

    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pool: str = "max2"

    def validate(self) -> None:
        if self.in_channels < 1 or self.out_channels < 1:
            raise InvalidConfig(f"channel counts must be >= 1: {self}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidConfig(f"kernel must be odd and >= 1: {self}")
        if self.stride < 1:
            raise InvalidConfig(f"stride must be >= 1: {self}")
        if self.pool not in POOL_KINDS:
            raise InvalidConfig(f"pool must be one of {POOL_KINDS}: {self}")

    def out_spatial(self, h: int, w: int) -> tuple[int, int]:
        """Spatial size after conv stride and pooling; raises if it hits 0."""
        p = (self.kernel - 1) // 2
        oh = (h + 2 * p - self.kernel) // self.stride + 1
        ow = (w + 2 * p - self.kernel) // self.stride + 1
        if self.pool != "none":
            oh, ow = oh // 2, ow // 2
        if oh < 1 or ow < 1:
            raise InvalidConfig(
                f"stage output spatial size {oh}x{ow} < 1 for input {h}x{w}: {self}"
            )
        return oh, ow


@dataclass(frozen=True)
class MLPSpec:
    """Fully-connected head; the last width is the class count."""

    layer_widths: tuple[int, ...] = (256, 128, 64, 4)
    out_classes: int = 4

    def validate(self) -> None:
        if len(self.layer_widths) < 1 or any(w < 1 for w in self.layer_widths):
            raise InvalidConfig(f"all MLP widths must be >= 1: {self}")
        if self.layer_widths[-1] != self.out_classes:
            raise InvalidConfig(
                f"final MLP width {self.layer_widths[-1]} != out_classes {self.out_classes}"
            )


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform He-style fan-in init, the standard choice for ReLU nets."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_stage(rng: np.random.Generator, spec: StageSpec) -> dict[str, np.ndarray]:
    k = spec.kernel
    w = he_uniform(rng, (spec.out_channels, spec.in_channels, k, k),
                   fan_in=spec.in_channels * k * k)
    b = np.zeros(spec.out_channels)
    return {"w": w, "b": b}


def init_mlp(rng: np.random.Generator, spec: MLPSpec, in_width: int) -> dict[str, np.ndarray]:
    params = {}
    prev = in_width
    for i, width in enumerate(spec.layer_widths):
        params[f"fc{i}.w"] = he_uniform(rng, (prev, width), fan_in=prev)
        params[f"fc{i}.b"] = np.zeros(width)
        prev = width
    return params


# ---------------------------------------------------------------------------
# convolution (same padding, stride) via im2col
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, tuple]:
    """Patch matrix of shape (C*k*k, N*OH*OW) so each conv is one large GEMM.

    Built from k^2 slice copies with row-contiguous inner runs; far cheaper
    than a single strided gather of k x k blocks.
    """
    n, c, h, w = x.shape
    p = (k - 1) // 2
    if p:
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p:p + h, p:p + w] = x
    else:
        xp = x
    oh = (h + 2 * p - k) // stride + 1
    ow = (w + 2 * p - k) // stride + 1
    cols = np.empty((c, k, k, n, oh, ow), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, :, ki:ki + oh * stride:stride,
                                 kj:kj + ow * stride:stride].swapaxes(0, 1)
    return cols.reshape(c * k * k, n * oh * ow), (x.shape, k, stride, p, oh, ow)


def conv2d_cached(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    c_out, c_in, k, _ = w.shape
    if x.ndim != 4 or x.shape[1] != c_in:
        raise ShapeMismatch(f"conv input {x.shape} incompatible with weight {w.shape}")
    cols, geom = _im2col(x, k, stride)
    n = x.shape[0]
    oh, ow = geom[4], geom[5]
    out = w.reshape(c_out, -1) @ cols
    out += b[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, n, oh, ow).swapaxes(0, 1))
    return out, (cols, w, geom)


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    cols, w, (x_shape, k, stride, p, oh, ow) = cache
    n, c, h, wd = x_shape
    c_out = w.shape[0]
    dmat = np.ascontiguousarray(dout.swapaxes(0, 1)).reshape(c_out, -1)
    dw = (dmat @ cols.T).reshape(w.shape)
    db = dmat.sum(axis=1)
    if not need_dx:
        return None, dw, db
    if stride == 1:
        # same-padded stride-1 conv: dx is a conv of dout with the kernel
        # flipped spatially and transposed over channels
        w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dcols, _ = _im2col(dout, k, 1)
        dx = w_rot.reshape(c, -1) @ dcols
        dx = np.ascontiguousarray(dx.reshape(c, n, h, wd).swapaxes(0, 1))
        return dx, dw, db
    dcols = (w.reshape(c_out, -1).T @ dmat).reshape(c, k, k, n, oh, ow)
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=dout.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + oh * stride:stride, kj:kj + ow * stride:stride] += \
                dcols[:, ki, kj].swapaxes(0, 1)
    dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
    return dx, dw, db


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    return conv2d_cached(x, w, b, stride)[0]


# ---------------------------------------------------------------------------
# activations and pooling
# ---------------------------------------------------------------------------

def relu_cached(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def _pool_quads(x: np.ndarray):
    """The four strided corner views of every 2x2 window (no copies)."""
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return [x[:, :, di:h2 * 2:2, dj:w2 * 2:2] for di in (0, 1) for dj in (0, 1)]


def maxpool2_cached(x: np.ndarray):
    quads = _pool_quads(x)
    out = np.maximum(np.maximum(quads[0], quads[1]),
                     np.maximum(quads[2], quads[3]))
    return np.ascontiguousarray(out), (x, out)


def maxpool2_backward(dout: np.ndarray, cache) -> np.ndarray:
    # ties route the gradient to the first window corner in scan order
    x, out = cache
    dx = np.zeros(x.shape, dtype=dout.dtype)
    unclaimed = np.ones(dout.shape, dtype=bool)
    for quad, dquad in zip(_pool_quads(x), _pool_quads(dx)):
        hit = (quad == out) & unclaimed
        dquad[hit] = dout[hit]
        unclaimed &= ~hit
    return dx


def avgpool2_cached(x: np.ndarray):
    quads = _pool_quads(x)
    out = (quads[0] + quads[1] + quads[2] + quads[3]) / 4.0
    return out, x.shape


def avgpool2_backward(dout: np.ndarray, x_shape) -> np.ndarray:
    dx = np.zeros(x_shape, dtype=dout.dtype)
    g = dout / 4.0
    for dquad in _pool_quads(dx):
        dquad[...] = g
    return dx


def _adaptive_bins(size_in: int, size_out: int) -> list[tuple[int, int]]:
    return [
        (int(np.floor(i * size_in / size_out)), int(np.ceil((i + 1) * size_in / size_out)))
        for i in range(size_out)
    ]


def adaptive_avg_pool_cached(x: np.ndarray, out_hw: tuple[int, int]):
    """Average pool to an arbitrary (H, W); identity when sizes already match."""
    n, c, h, w = x.shape
    th, tw = out_hw
    if (h, w) == (th, tw):
        return x.copy(), (x.shape, out_hw)
    rows = _adaptive_bins(h, th)
    cols = _adaptive_bins(w, tw)
    out = np.empty((n, c, th, tw), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    return out, (x.shape, out_hw)


def adaptive_avg_pool_backward(dout: np.ndarray, cache) -> np.ndarray:
    x_shape, (th, tw) = cache
    n, c, h, w = x_shape
    if (h, w) == (th, tw):
        return dout.copy()
    rows = _adaptive_bins(h, th)
    cols = _adaptive_bins(w, tw)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            area = (r1 - r0) * (c1 - c0)
            dx[:, :, r0:r1, c0:c1] += dout[:, :, i, j][:, :, None, None] / area
    return dx


def adaptive_avg_pool(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    return adaptive_avg_pool_cached(x, out_hw)[0]


# ---------------------------------------------------------------------------
# affine / MLP
# ---------------------------------------------------------------------------

def affine_cached(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"affine input {x.shape} incompatible with weight {w.shape}")
    return x @ w + b, (x, w)


def affine_backward(dout: np.ndarray, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


# ---------------------------------------------------------------------------
# composed stage and head
# ---------------------------------------------------------------------------

def stage_forward_cached(params: dict, spec: StageSpec, x: np.ndarray):
    """conv -> ReLU -> optional 2x2 pool."""
    if x.shape[1] != spec.in_channels:
        raise ShapeMismatch(
            f"stage expects {spec.in_channels} channels, got {x.shape[1]}"
        )
    z, conv_cache = conv2d_cached(x, params["w"], params["b"], spec.stride)
    r, mask = relu_cached(z)
    if spec.pool == "max2":
        out, pool_cache = maxpool2_cached(r)
    elif spec.pool == "avg2":
        out, pool_cache = avgpool2_cached(r)
    else:
        out, pool_cache = r, None
    return out, (conv_cache, mask, pool_cache, spec.pool)


def stage_backward(dout: np.ndarray, cache, need_dx: bool = True):
    conv_cache, mask, pool_cache, pool = cache
    if pool == "max2":
        dout = maxpool2_backward(dout, pool_cache)
    elif pool == "avg2":
        dout = avgpool2_backward(dout, pool_cache)
    dz = relu_backward(dout, mask)
    return conv2d_backward(dz, conv_cache, need_dx=need_dx)


def stage_forward(params: dict, spec: StageSpec, x: np.ndarray) -> np.ndarray:
    return stage_forward_cached(params, spec, x)[0]


def mlp_forward_cached(params: dict, spec: MLPSpec, x: np.ndarray):
    """Affine+ReLU chain; the final layer is affine with no activation."""
    caches = []
    h = x
    last = len(spec.layer_widths) - 1
    for i in range(len(spec.layer_widths)):
        h, acache = affine_cached(h, params[f"fc{i}.w"], params[f"fc{i}.b"])
        if i != last:
            h, mask = relu_cached(h)
        else:
            mask = None
        caches.append((acache, mask))
    return h, caches


def mlp_backward(dout: np.ndarray, caches):
    grads = {}
    d = dout
    for i in reversed(range(len(caches))):
        acache, mask = caches[i]
        if mask is not None:
            d = relu_backward(d, mask)
        d, dw, db = affine_backward(d, acache)
        grads[f"fc{i}.w"] = dw
        grads[f"fc{i}.b"] = db
    return d, grads


def mlp_forward(params: dict, spec: MLPSpec, x: np.ndarray) -> np.ndarray:
    return mlp_forward_cached(params, spec, x)[0]
