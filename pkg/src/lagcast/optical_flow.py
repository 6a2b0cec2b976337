"""Pyramidal Lucas-Kanade motion estimation (sparse features, densified).

This is the non-differentiable baseline for the learned motion network.
One motion field is returned per sequence: flows between consecutive frame
pairs are averaged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 3
    window_radius: int = 7
    iterations: int = 10
    min_eigenvalue: float = 1e-4
    smoothing_sigma: float = 8.0
    max_points: int = 200
    quality: float = 0.01
    min_distance: int = 3
    block_radius: int = 2

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.window_radius < 2:
            raise ValueError("window_radius must be >= 2")


@dataclass
class FlowResult:
    motion: np.ndarray  # (2, H, W): x and y displacement in px/step
    n_tracked: int
    warning: str | None = None


def _prepare(img):
    return np.log1p(np.maximum(np.asarray(img, dtype=np.float64), 0.0))


def min_eigenvalue_map(img, block_radius=2):
    """Smaller eigenvalue of the local structure tensor (box window)."""
    gy, gx = np.gradient(np.asarray(img, dtype=np.float64))
    size = 2 * block_radius + 1
    sxx = ndimage.uniform_filter(gx * gx, size, mode="nearest")
    syy = ndimage.uniform_filter(gy * gy, size, mode="nearest")
    sxy = ndimage.uniform_filter(gx * gy, size, mode="nearest")
    tr = 0.5 * (sxx + syy)
    det = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy ** 2, 0.0))
    return np.maximum(tr - det, 0.0)


def feature_points(field, max_points=200, quality=0.01, min_distance=3, block_radius=2):
    """Shi-Tomasi corners as an (N, 2) array of (row, col), strongest first.

    Ties in corner strength are broken by row-major position.
    """
    values = getattr(field, "values", field)
    if max_points <= 0:
        return np.zeros((0, 2), dtype=np.int64)
    lam = min_eigenvalue_map(values, block_radius)
    peak = lam.max()
    if peak <= 1e-12:
        return np.zeros((0, 2), dtype=np.int64)
    cand = np.flatnonzero(lam.ravel() >= quality * peak)
    # stable sort on descending strength keeps row-major order among ties
    cand = cand[np.argsort(-lam.ravel()[cand], kind="stable")]
    H, W = lam.shape
    taken = np.zeros((H, W), dtype=bool)
    points = []
    for flat in cand:
        r, c = divmod(int(flat), W)
        if taken[r, c]:
            continue
        points.append((r, c))
        if len(points) >= max_points:
            break
        taken[max(0, r - min_distance):r + min_distance + 1, max(0, c - min_distance):c + min_distance + 1] = True
    return np.array(points, dtype=np.int64).reshape(-1, 2)


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        prev = pyr[-1]
        if min(prev.shape) < 8:
            break
        blurred = ndimage.gaussian_filter(prev, 1.0, mode="nearest")
        pyr.append(blurred[::2, ::2])
    return pyr


def _sample(img, rows, cols):
    """Bilinear lookup with edge clamping."""
    H, W = img.shape
    rows = np.clip(rows, 0, H - 1)
    cols = np.clip(cols, 0, W - 1)
    r0 = np.minimum(np.floor(rows).astype(np.intp), H - 2)
    c0 = np.minimum(np.floor(cols).astype(np.intp), W - 2)
    fr = rows - r0
    fc = cols - c0
    flat = img.ravel()
    i00 = r0 * W + c0
    top = flat[i00] * (1 - fc) + flat[i00 + 1] * fc
    bot = flat[i00 + W] * (1 - fc) + flat[i00 + W + 1] * fc
    return top * (1 - fr) + bot * fr


def track_points(prev, nxt, points, config=PyramidConfig()):
    """Track (row, col) points from ``prev`` to ``nxt``.

    Returns ``(displacement (N, 2) as (drow, dcol), ok mask)``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(points)
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    pyr0 = _pyramid(prev, config.levels)
    pyr1 = _pyramid(nxt, config.levels)
    r = config.window_radius
    offs = np.arange(-r, r + 1, dtype=np.float64)
    wr, wc = np.meshgrid(offs, offs, indexing="ij")
    wr = wr.ravel()[None]
    wc = wc.ravel()[None]
    guess = np.zeros((n, 2))
    ok = np.ones(n, dtype=bool)
    for level in range(len(pyr0) - 1, -1, -1):
        I = pyr0[level]
        J = pyr1[level]
        gy, gx = np.gradient(I)
        p = points / (2 ** level)
        rows = p[:, :1] + wr
        cols = p[:, 1:] + wc
        Ix = _sample(gx, rows, cols)
        Iy = _sample(gy, rows, cols)
        Iw = _sample(I, rows, cols)
        gxx = (Ix * Ix).sum(1)
        gyy = (Iy * Iy).sum(1)
        gxy = (Ix * Iy).sum(1)
        det = gxx * gyy - gxy * gxy
        npix = Ix.shape[1]
        tr = 0.5 * (gxx + gyy)
        lam_min = (tr - np.sqrt(np.maximum(0.25 * (gxx - gyy) ** 2 + gxy ** 2, 0.0))) / npix
        good = (lam_min > config.min_eigenvalue) & (np.abs(det) > 1e-18)
        safe_det = np.where(good, det, 1.0)
        v = np.zeros((n, 2))
        for _ in range(config.iterations):
            Jw = _sample(J, rows + guess[:, :1] + v[:, :1], cols + guess[:, 1:] + v[:, 1:])
            diff = Iw - Jw
            bx = (diff * Ix).sum(1)
            by = (diff * Iy).sum(1)
            # solve [[gxx, gxy], [gxy, gyy]] [vc, vr] = [bx, by]
            vc = (gyy * bx - gxy * by) / safe_det
            vr = (gxx * by - gxy * bx) / safe_det
            step = np.where(good[:, None], np.stack([vr, vc], 1), 0.0)
            v += step
            if np.all(np.abs(step) < 1e-3):
                break
        if level == 0:
            ok &= good
            guess = guess + v
        else:
            guess = 2 * (guess + v)
    H, W = prev.shape
    end = points + guess
    ok &= np.all(np.isfinite(guess), axis=1)
    ok &= (end[:, 0] >= 0) & (end[:, 0] <= H - 1) & (end[:, 1] >= 0) & (end[:, 1] <= W - 1)
    return guess, ok


def densify(points, vectors, shape, sigma):
    """Gaussian-weighted interpolation of sparse vectors onto the full grid.

    ``points`` are (row, col); ``vectors`` are (dx, dy). Returns (2, H, W).
    """
    H, W = shape
    if len(points) == 0:
        return np.zeros((2, H, W))
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    d2 = (rr.ravel()[:, None] - points[:, 0][None]) ** 2 + (cc.ravel()[:, None] - points[:, 1][None]) ** 2
    logw = -d2 / (2 * sigma ** 2)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    dense = w @ vectors
    return dense.T.reshape(2, H, W)


def _remove_outliers(vectors, k=3.0):
    """Keep vectors within ``k`` scaled MADs of the median, per component."""
    if len(vectors) < 5:
        return np.ones(len(vectors), dtype=bool)
    med = np.median(vectors, axis=0)
    mad = np.median(np.abs(vectors - med), axis=0) * 1.4826 + 1e-3
    return np.all(np.abs(vectors - med) <= k * mad + 0.1, axis=1)


def pair_flow(prev, nxt, config=PyramidConfig()):
    """Sparse LK flow between two frames: (points (N, 2), vectors (N, 2) as (dx, dy))."""
    a = _prepare(prev)
    b = _prepare(nxt)
    pts = feature_points(a, config.max_points, config.quality, config.min_distance, config.block_radius)
    if len(pts) == 0:
        return np.zeros((0, 2)), np.zeros((0, 2))
    disp, ok = track_points(a, b, pts, config)
    pts = pts[ok].astype(np.float64)
    vec = disp[ok][:, ::-1]  # (drow, dcol) -> (dx, dy)
    keep = _remove_outliers(vec)
    return pts[keep], vec[keep]


def lucas_kanade_flow(seq, config=PyramidConfig()) -> FlowResult:
    """One dense motion field for a sequence of >= 2 frames.

    ``seq`` is a FieldSequence or a (T, H, W) array of rain rates.
    """
    frames = seq.stack() if hasattr(seq, "stack") else np.asarray(seq, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ValueError(f"lucas_kanade_flow needs at least 2 frames, got shape {frames.shape}")
    shape = frames.shape[1:]
    fields = []
    total = 0
    for prev, nxt in zip(frames[:-1], frames[1:]):
        pts, vec = pair_flow(prev, nxt, config)
        if len(pts):
            fields.append(densify(pts, vec, shape, config.smoothing_sigma))
            total += len(pts)
    if not fields:
        return FlowResult(np.zeros((2,) + shape), 0, warning="no trackable features; returning zero motion")
    return FlowResult(np.mean(fields, axis=0), total)
