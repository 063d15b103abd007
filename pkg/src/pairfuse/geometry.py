"""Polygon cropping geometry: min-area rectangles and perspective warps.

Coordinates are image pixel coordinates: x grows right, y grows down.
Rectangle corners are ordered clockwise on screen starting from the
top-left-most corner (smallest x + y, ties by y then x).
"""

from __future__ import annotations

import numpy as np

from .errors import DegeneratePolygon, SingularHomography


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull; vertices in counterclockwise math order."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        raise DegeneratePolygon(f"need >= 3 distinct vertices, got {len(pts)}")

    def cross(u, v):
        return u[0] * v[1] - u[1] * v[0]

    # pts from np.unique are lexicographically sorted already
    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2 and cross(out[-1] - out[-2], p - out[-2]) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        raise DegeneratePolygon("polygon is collinear (zero area)")
    return hull


def polygon_area(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return float(abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) / 2.0)


def _order_corners(corners: np.ndarray) -> np.ndarray:
    center = corners.mean(axis=0)
    ang = np.arctan2(corners[:, 1] - center[1], corners[:, 0] - center[0])
    corners = corners[np.argsort(ang)]  # clockwise on screen (y grows down)
    s = corners.sum(axis=1)
    start = np.lexsort((corners[:, 0], corners[:, 1], s))[0]
    return np.roll(corners, -start, axis=0)


def min_area_rect(polygon) -> np.ndarray:
    """Smallest-area rotated rectangle containing every polygon vertex.

    Rotating-calipers over the convex hull: the optimal rectangle shares an
    edge direction with some hull edge. Returns a (4, 2) corner array.
    """
    pts = np.asarray(polygon, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise DegeneratePolygon(f"polygon must be (>=3, 2), got {pts.shape}")
    hull = convex_hull(pts)
    if polygon_area(hull) <= 0:
        raise DegeneratePolygon("polygon has zero area")
    edges = np.diff(np.vstack([hull, hull[:1]]), axis=0)
    angles = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2))

    best = None
    for theta in angles:
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, s], [-s, c]])  # rotate by -theta
        rp = hull @ rot.T
        lo, hi = rp.min(axis=0), rp.max(axis=0)
        area = (hi[0] - lo[0]) * (hi[1] - lo[1])
        if best is None or area < best[0]:
            best = (area, rot, lo, hi)

    _, rot, lo, hi = best
    local = np.array([
        [lo[0], lo[1]],
        [hi[0], lo[1]],
        [hi[0], hi[1]],
        [lo[0], hi[1]],
    ])
    corners = local @ rot  # inverse rotation: rot is orthonormal
    return _order_corners(corners)


def rect_area(corners: np.ndarray) -> float:
    return polygon_area(corners)


def expand_rect(corners: np.ndarray, margin: float) -> np.ndarray:
    """Grow a rectangle by `margin` pixels on every side, along its own axes."""
    corners = np.asarray(corners, dtype=np.float64)
    if margin == 0:
        return corners.copy()
    center = corners.mean(axis=0)
    u = corners[1] - corners[0]
    v = corners[3] - corners[0]
    w = max(np.linalg.norm(u), 1e-9)
    h = max(np.linalg.norm(v), 1e-9)
    uh, vh = u / w, v / h
    rel = corners - center
    au = (rel @ uh) * ((w + 2 * margin) / w)
    av = (rel @ vh) * ((h + 2 * margin) / h)
    return center + np.outer(au, uh) + np.outer(av, vh)


# ---------------------------------------------------------------------------
# homography + sampling
# ---------------------------------------------------------------------------

def homography_from_points(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 map H with H @ [src, 1] ~ [dst, 1] from 4 correspondences (DLT)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise SingularHomography("need exactly 4 source and 4 target points")
    rows = []
    rhs = []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rhs.append(u)
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.append(v)
    try:
        h = np.linalg.solve(np.array(rows), np.array(rhs))
    except np.linalg.LinAlgError as exc:
        raise SingularHomography(f"correspondences are degenerate: {exc}") from exc
    return np.append(h, 1.0).reshape(3, 3)


def apply_homography(h_mat: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    ones = np.ones((len(pts), 1))
    mapped = np.hstack([pts, ones]) @ h_mat.T
    w = mapped[:, 2:3]
    if np.any(np.abs(w) < 1e-12):
        raise SingularHomography("point maps to infinity")
    return mapped[:, :2] / w


def sample_bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sample at real coordinates with edge clamping. image is (H,W,C)."""
    h, w = image.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def warp_image(image: np.ndarray, h_dst_to_src: np.ndarray,
               out_hw: tuple[int, int]) -> np.ndarray:
    """Inverse-map warp: for each output pixel sample the source bilinearly."""
    oh, ow = out_hw
    jj, ii = np.meshgrid(np.arange(ow, dtype=np.float64),
                         np.arange(oh, dtype=np.float64))
    pts = np.stack([jj.ravel(), ii.ravel()], axis=1)
    src = apply_homography(h_dst_to_src, pts)
    out = sample_bilinear(image, src[:, 0], src[:, 1])
    return out.reshape(oh, ow, image.shape[2])


def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Cubic-convolution kernel weights for the 4 neighbors at fraction t."""
    # offsets of the 4 taps relative to the sample point: -1-t, -t, 1-t, 2-t
    d = np.stack([1 + t, t, 1 - t, 2 - t], axis=-1)
    ad = np.abs(d)
    w = np.where(
        ad <= 1,
        (a + 2) * ad ** 3 - (a + 3) * ad ** 2 + 1,
        a * ad ** 3 - 5 * a * ad ** 2 + 8 * a * ad - 4 * a,
    )
    return w


def _resize_axis_cubic(image: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    image = np.moveaxis(image, axis, 0)
    in_len = image.shape[0]
    pos = (np.arange(out_len, dtype=np.float64) + 0.5) * in_len / out_len - 0.5
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    weights = _cubic_weights(frac)
    out = np.zeros((out_len,) + image.shape[1:])
    for k in range(4):
        idx = np.clip(base - 1 + k, 0, in_len - 1)
        out += weights[:, k].reshape((-1,) + (1,) * (image.ndim - 1)) * image[idx]
    return np.moveaxis(out, 0, axis)


def resize_bicubic(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    out = _resize_axis_cubic(image, out_hw[0], axis=0)
    return _resize_axis_cubic(out, out_hw[1], axis=1)


def warp_to_square(image: np.ndarray, rect_corners: np.ndarray,
                   out_size: int) -> np.ndarray:
    """Crop a rotated rectangle into an out_size x out_size square.

    The rectangle is first perspective-warped (bilinear) onto a square whose
    side matches the rectangle's longer side, then resized to out_size with
    cubic interpolation; the resize is skipped when the sizes already agree.
    """
    if out_size < 8:
        raise ValueError(f"out_size must be >= 8, got {out_size}")
    corners = np.asarray(rect_corners, dtype=np.float64)
    if corners.shape != (4, 2):
        raise SingularHomography(f"need 4 corners, got shape {corners.shape}")
    side_w = np.linalg.norm(corners[1] - corners[0])
    side_h = np.linalg.norm(corners[3] - corners[0])
    inter = max(2, int(round(max(side_w, side_h))) + 1)
    dst = np.array([
        [0, 0],
        [inter - 1, 0],
        [inter - 1, inter - 1],
        [0, inter - 1],
    ], dtype=np.float64)
    h_dst_to_src = homography_from_points(dst, corners)
    square = warp_image(image, h_dst_to_src, (inter, inter))
    if inter == out_size:
        return square
    return resize_bicubic(square, (out_size, out_size))
