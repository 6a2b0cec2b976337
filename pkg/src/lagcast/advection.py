"""Differentiable semi-Lagrangian extrapolation and motion-field divergence.

Motion fields are (B, 2, H, W) tensors in pixels per time step: channel 0
is the x (column) displacement, channel 1 the y (row) displacement. One
step of extrapolation pulls each output cell from ``x - u(x)``.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor, ShapeError

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64)

_grid_cache = {}


def base_grid(batch, height, width, dtype):
    """Absolute (x, y) pixel coordinates, shape (batch, 2, H, W)."""
    key = (batch, height, width, np.dtype(dtype).str)
    grid = _grid_cache.get(key)
    if grid is None:
        ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
        grid = np.broadcast_to(np.stack([xs, ys])[None], (batch, 2, height, width)).astype(dtype)
        grid.setflags(write=False)
        _grid_cache[key] = grid
    return grid


def _check_motion(field, motion, op):
    if motion.shape[1] != 2 or motion.shape[0] != field.shape[0] or motion.shape[2:] != field.shape[2:]:
        raise ShapeError(f"{op}: field {field.shape} and motion {motion.shape} do not share geometry")


def departure_points(motion):
    """Upstream sample positions ``x - u(x)`` as a DiffTensor."""
    B, _, H, W = motion.shape
    return ad.sub(DiffTensor(base_grid(B, H, W, motion.dtype)), motion)


def warp_once(field, motion, coords=None):
    _check_motion(field, motion, "warp_once")
    if coords is None:
        coords = departure_points(motion)
    return ad.grid_sample_bilinear(field, coords)


def extrapolate(field, motion, steps):
    """Apply ``steps`` one-step backward warps along the same motion field."""
    if steps < 0:
        raise ValueError(f"extrapolate: steps must be >= 0, got {steps}")
    _check_motion(field, motion, "extrapolate")
    if steps == 0:
        return field
    coords = departure_points(motion)
    out = field
    for _ in range(steps):
        out = ad.grid_sample_bilinear(out, coords)
    return out


def to_lagrangian(frames, motion, reference=None):
    """Extrapolate every frame (channel i, 1-based) ``reference - i`` steps.

    ``frames`` is (B, n, H, W); ``reference`` is n (last observation,
    left untouched) or n + 1 (the one-step-ahead time). Returns a
    (B, n, H, W) tensor of the transformed frames.
    """
    n = frames.shape[1]
    if reference is None:
        reference = n + 1
    if reference not in (n, n + 1):
        raise ValueError(f"to_lagrangian: reference must be {n} or {n + 1}, got {reference}")
    _check_motion(frames, motion, "to_lagrangian")
    coords = departure_points(motion)
    # frame 1 is warped at every stage, frame k joins at stage k
    acc = frames[:, 0:1]
    for k in range(1, n):
        acc = ad.concat([ad.grid_sample_bilinear(acc, coords), frames[:, k:k + 1]])
    if reference == n + 1:
        acc = ad.grid_sample_bilinear(acc, coords)
    return acc


def temporal_difference(stack):
    """n - 1 differences of consecutive channels, as a (B, n-1, H, W) tensor."""
    n = stack.shape[1]
    if n < 2:
        raise ValueError(f"temporal_difference: need at least 2 fields, got {n}")
    return ad.sub(stack[:, 1:n], stack[:, 0:n - 1])


def divergence(motion, dx=1.0):
    """du_x/dx + du_y/dy per cell with 3x3 Sobel stencils, replicate-padded.

    The stencils are evaluated as weighted central differences so a constant
    field gives exactly zero.
    """
    if motion.shape[1] != 2:
        raise ShapeError(f"divergence: motion needs 2 channels, got shape {motion.shape}")
    H, W = motion.shape[2:]
    p = ad.pad_replicate(motion, 1)
    ddx = ad.sub(p[:, 0:1, :, 2:W + 2], p[:, 0:1, :, 0:W])
    gx = ad.add(ad.add(ddx[:, :, 0:H], ad.mul_scalar(ddx[:, :, 1:H + 1], 2.0)), ddx[:, :, 2:H + 2])
    ddy = ad.sub(p[:, 1:2, 2:H + 2, :], p[:, 1:2, 0:H, :])
    gy = ad.add(ad.add(ddy[:, :, :, 0:W], ad.mul_scalar(ddy[:, :, :, 1:W + 1], 2.0)), ddy[:, :, :, 2:W + 2])
    return ad.mul_scalar(ad.add(gx, gy), 1.0 / (8.0 * dx))


def divergence_penalty(motion, dx=1.0):
    """Mean absolute divergence over interior cells (one-cell border excluded)."""
    div = divergence(motion, dx)
    H, W = div.shape[2:]
    return ad.mean(ad.abs_(div[:, :, 1:H - 1, 1:W - 1]))


def divergence_np(motion, dx=1.0):
    """Plain-numpy divergence of a (2, H, W) or (B, 2, H, W) array."""
    m = np.asarray(motion, dtype=np.float64)
    squeeze = m.ndim == 3
    if squeeze:
        m = m[None]
    out = divergence(DiffTensor(m), dx).values[:, 0]
    return out[0] if squeeze else out
