"""Grid containers, bilinear/nearest warping, forward differences, residuals.

Conventions used throughout the package:

* an image is a float64 array of shape ``(..., H, W)`` with values in [0, 1];
* a displacement field has shape ``(..., 2, H, W)``; channel 0 is ``dx``
  (added to the column index), channel 1 is ``dy`` (added to the row index);
* a mask is a boolean array of shape ``(..., H, W)``.

Leading batch dimensions are broadcast through every operation.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Inputs whose grid dimensions disagree."""


class InvariantError(ValueError):
    """A value outside the range its type allows."""


def as_image(data, name="image"):
    """Validate and convert ``data`` to a float64 image array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim < 2 or arr.size == 0:
        raise ShapeError(f"{name} must be a nonempty grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise InvariantError(f"{name} values must lie in [0, 1]")
    return arr


def as_score(data, name="score"):
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise InvariantError(f"{name} values must lie in [0, 1]")
    return arr


def as_field(data, name="field"):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim < 3 or arr.shape[-3] != 2:
        raise ShapeError(f"{name} must have shape (..., 2, H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvariantError(f"{name} has non-finite entries")
    return arr


def as_mask(data, name="mask"):
    arr = np.asarray(data)
    if arr.ndim < 2:
        raise ShapeError(f"{name} must be a grid, got shape {arr.shape}")
    return arr.astype(bool, copy=False)


def check_same_grid(*arrays, names=None):
    """Raise ShapeError unless every array shares the trailing (H, W)."""
    shapes = [a.shape[-2:] for a in arrays]
    if any(s != shapes[0] for s in shapes):
        label = ", ".join(names) if names else "inputs"
        raise ShapeError(f"grid dimensions differ between {label}: {shapes}")


def zero_field(height, width):
    return np.zeros((2, height, width))


def _sample_coords(disp):
    h, w = disp.shape[-2:]
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    return cols + disp[..., 0, :, :], rows + disp[..., 1, :, :]


def _axis_weights(coord, n):
    """Clamp ``coord`` to [0, n-1] and split into cell index and fraction.

    Also returns a 0/1 array marking where the raw coordinate was inside the
    rectangle; outside it the clamped sample is constant in ``coord``.
    """
    inside = (coord >= 0.0) & (coord <= n - 1)
    c = np.clip(coord, 0.0, n - 1)
    i0 = np.clip(np.floor(c).astype(np.intp), 0, max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    frac = c - i0
    return i0, i1, frac, inside.astype(np.float64)


def _gather(src, rows, cols):
    if src.ndim == 2:
        return src[rows, cols]
    flat = src.reshape(-1, *src.shape[-2:])
    rows = np.broadcast_to(rows, (flat.shape[0],) + rows.shape[-2:])
    cols = np.broadcast_to(cols, (flat.shape[0],) + cols.shape[-2:])
    b = np.arange(flat.shape[0])[:, None, None]
    return flat[b, rows, cols].reshape(src.shape[:-2] + rows.shape[-2:])


def _bilinear(src, disp, with_grad):
    src = np.asarray(src, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    if disp.ndim < 3 or disp.shape[-3] != 2:
        raise ShapeError(f"displacement must have shape (..., 2, H, W), got {disp.shape}")
    check_same_grid(src, disp, names=("src", "disp"))
    h, w = src.shape[-2:]
    x, y = _sample_coords(disp)
    x0, x1, fx, in_x = _axis_weights(x, w)
    y0, y1, fy, in_y = _axis_weights(y, h)
    v00 = _gather(src, y0, x0)
    v01 = _gather(src, y0, x1)
    v10 = _gather(src, y1, x0)
    v11 = _gather(src, y1, x1)
    # (1-f)*a + f*b is exact at f in {0, 1}, so integer shifts are lookups
    top = (1.0 - fx) * v00 + fx * v01
    bottom = (1.0 - fx) * v10 + fx * v11
    out = (1.0 - fy) * top + fy * bottom
    if not with_grad:
        return out
    d_dx = ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10)) * in_x
    d_dy = (bottom - top) * in_y
    return out, d_dx, d_dy


def warp_bilinear(src, disp):
    """Sample ``src`` at ``x + disp(x)`` with clamp-to-edge bilinear interpolation.

    Parameters
    ----------
    src : ndarray, shape (..., H, W)
        Source image.
    disp : ndarray, shape (..., 2, H, W)
        Displacement in pixels, ``(dx, dy)`` channel order.

    Returns
    -------
    ndarray, shape (..., H, W)
        Warped image. Every value is a convex combination of source values.
    """
    return _bilinear(src, disp, with_grad=False)


def warp_bilinear_with_grad(src, disp):
    """Warp and return the per-pixel partial derivatives w.r.t. ``dx`` and ``dy``.

    The sample at pixel ``x`` only depends on ``disp(x)``, so the Jacobian is
    diagonal and two grids describe it completely. At integer sample
    coordinates the right-sided derivative is returned; where the coordinate
    is clamped the derivative is zero.
    """
    return _bilinear(src, disp, with_grad=True)


def warp_bilinear_vjp(src, disp, grad_out):
    """Pull an adjoint on the warped image back onto the displacement field."""
    _, d_dx, d_dy = _bilinear(src, disp, with_grad=True)
    return np.stack([grad_out * d_dx, grad_out * d_dy], axis=-3)


def warp_nearest(mask, disp):
    """Warp a mask by nearest-neighbour lookup at ``x + disp(x)``, clamped."""
    mask = as_mask(mask)
    disp = np.asarray(disp, dtype=np.float64)
    check_same_grid(mask, disp, names=("mask", "disp"))
    h, w = mask.shape[-2:]
    x, y = _sample_coords(disp)
    # floor(v + 0.5): half-way ties go up, deterministic across numpy versions
    cols = np.clip(np.floor(x + 0.5), 0, w - 1).astype(np.intp)
    rows = np.clip(np.floor(y + 0.5), 0, h - 1).astype(np.intp)
    return _gather(mask, rows, cols)


def spatial_gradient(grid):
    """Forward differences along columns (x) and rows (y).

    The trailing column of ``g_x`` and trailing row of ``g_y`` are zero.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim < 2 or grid.size == 0:
        raise ShapeError(f"grid must be nonempty and at least 2D, got {grid.shape}")
    gx = np.zeros_like(grid)
    gy = np.zeros_like(grid)
    gx[..., :, :-1] = grid[..., :, 1:] - grid[..., :, :-1]
    gy[..., :-1, :] = grid[..., 1:, :] - grid[..., :-1, :]
    return gx, gy


def spatial_gradient_adjoint(adj_x, adj_y):
    """Transpose of :func:`spatial_gradient` applied to a pair of adjoints."""
    adj_x = np.asarray(adj_x, dtype=np.float64)
    adj_y = np.asarray(adj_y, dtype=np.float64)
    out = np.zeros_like(adj_x)
    ax = adj_x[..., :, :-1]
    out[..., :, 1:] += ax
    out[..., :, :-1] -= ax
    ay = adj_y[..., :-1, :]
    out[..., 1:, :] += ay
    out[..., :-1, :] -= ay
    return out


def residual_map(target, warped):
    """Squared intensity difference per pixel."""
    target = np.asarray(target, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    check_same_grid(target, warped, names=("target", "warped"))
    return (target - warped) ** 2
