"""Differentiable affine spatial transformer with zero padding.

Pose vectors are 6 coefficients per sample, laid out (s_x, r_x, t_x,
r_y, s_y, t_y) as the row-major 2x3 matrix

    [[s_x, r_x, t_x],
     [r_y, s_y, t_y]]

mapping normalized *output* coordinates to normalized *input* coordinates
(inverse warping). Coordinates use align-corners semantics: pixel i of an
n-pixel axis sits at -1 + 2i/(n-1), so the identity pose reproduces the
input exactly. Scales >= 1 therefore shrink the object relative to the
canvas; the minimum-scale constraint keeps a generated object from
spilling outside it.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, make_op
from .errors import ConfigError

POSE_FIELDS = ("s_x", "r_x", "t_x", "r_y", "s_y", "t_y")


def identity_pose(n: int, dtype=np.float32) -> Tensor:
    pose = np.zeros((n, 6), dtype=dtype)
    pose[:, 0] = 1.0
    pose[:, 4] = 1.0
    return dc.constant(pose)


def constrain_pose(raw: Tensor, s_min: float) -> Tensor:
    """Map a raw 6-vector from the pose head into a valid affine pose.

    Scales get a softplus floor at s_min; translations are tanh-bounded by
    (s - 1) so a unit object stays fully on canvas; the two off-diagonal
    terms pass through untouched. Smooth everywhere.
    """
    if s_min < 1.0:
        raise ConfigError(f"minimum scale {s_min} < 1 would let the object exceed the canvas")
    sx = dc.softplus(raw[:, 0:1]) + s_min
    sy = dc.softplus(raw[:, 4:5]) + s_min
    rx = raw[:, 1:2]
    ry = raw[:, 3:4]
    tx = dc.tanh(raw[:, 2:3]) * (sx - 1.0)
    ty = dc.tanh(raw[:, 5:6]) * (sy - 1.0)
    return dc.concat([sx, rx, tx, ry, sy, ty], axis=1)


def _axis_coords(n: int, dtype) -> np.ndarray:
    if n == 1:
        return np.zeros(1, dtype=dtype)
    return np.linspace(-1.0, 1.0, n, dtype=dtype)


def grid_generate(affine: Tensor, h_out: int, w_out: int) -> Tensor:
    """Sampling grid (N, H_out, W_out, 2): input coords for each output pixel."""
    if h_out < 1 or w_out < 1:
        raise ConfigError(f"grid size {h_out}x{w_out} must be at least 1x1")
    dtype = affine.dtype
    xs = _axis_coords(w_out, dtype)
    ys = _axis_coords(h_out, dtype)
    mesh_x = dc.constant(np.broadcast_to(xs, (h_out, w_out)).copy())
    mesh_y = dc.constant(np.broadcast_to(ys[:, None], (h_out, w_out)).copy())

    def coef(i):
        return affine[:, i:i + 1].reshape(-1, 1, 1)

    gx = coef(0) * mesh_x + coef(1) * mesh_y + coef(2)
    gy = coef(3) * mesh_x + coef(4) * mesh_y + coef(5)
    n = affine.shape[0]
    return dc.concat([gx.reshape(n, h_out, w_out, 1), gy.reshape(n, h_out, w_out, 1)], axis=3)


def sample_bilinear(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of an NCHW batch at grid locations, zero outside.

    Each output pixel blends the 4 nearest input pixels; taps that fall
    outside the input extent contribute zero, so sample points far outside
    [-1, 1] are exactly zero. Differentiable with respect to both the
    input and the grid (the grid derivative is the usual piecewise-linear
    one, discontinuous exactly at cell boundaries).
    """
    x = x if isinstance(x, Tensor) else dc.constant(x)
    grid = grid if isinstance(grid, Tensor) else dc.constant(grid)
    n, c, h, w = x.shape
    gn, ho, wo, two = grid.shape
    if gn != n:
        raise dc.DimensionError(f"batch axis mismatch: input {n}, grid {gn}")
    if two != 2:
        raise dc.DimensionError(f"grid last axis must be 2, got {two}")

    ix = (grid.data[..., 0] + 1.0) * (w - 1) / 2.0
    iy = (grid.data[..., 1] + 1.0) * (h - 1) / 2.0
    x0 = np.floor(ix).astype(np.int64)
    y0 = np.floor(iy).astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1
    wx = (ix - x0).astype(x.dtype)
    wy = (iy - y0).astype(x.dtype)

    def valid(xi, yi):
        return ((xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)).astype(x.dtype)

    xflat = x.data.reshape(n, c, h * w)
    l = ho * wo

    def gather(xi, yi, v):
        idx = (np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1)).reshape(n, 1, l)
        vals = np.take_along_axis(xflat, np.broadcast_to(idx, (n, c, l)), axis=2)
        return vals.reshape(n, c, ho, wo) * v[:, None, :, :]

    v00 = valid(x0, y0)
    v01 = valid(x1, y0)
    v10 = valid(x0, y1)
    v11 = valid(x1, y1)
    t00 = gather(x0, y0, v00)
    t01 = gather(x1, y0, v01)
    t10 = gather(x0, y1, v10)
    t11 = gather(x1, y1, v11)

    w00 = ((1 - wx) * (1 - wy))[:, None]
    w01 = (wx * (1 - wy))[:, None]
    w10 = ((1 - wx) * wy)[:, None]
    w11 = (wx * wy)[:, None]
    out = w00 * t00 + w01 * t01 + w10 * t10 + w11 * t11

    def bw(g):
        dx = None
        dgrid = None
        if x.requires_grad:
            dx = np.zeros((n, c, h * w), dtype=x.dtype)
            nn = np.broadcast_to(np.arange(n)[:, None, None], (n, c, l))
            cc = np.broadcast_to(np.arange(c)[None, :, None], (n, c, l))
            for xi, yi, v, wgt in ((x0, y0, v00, w00), (x1, y0, v01, w01),
                                   (x0, y1, v10, w10), (x1, y1, v11, w11)):
                idx = (np.clip(yi, 0, h - 1) * w + np.clip(xi, 0, w - 1))
                contrib = (g * wgt * v[:, None]).reshape(n, c, l)
                pix = np.broadcast_to(idx.reshape(n, 1, l), (n, c, l))
                np.add.at(dx, (nn, cc, pix), contrib)
            dx = dx.reshape(n, c, h, w)
        if grid.requires_grad:
            gs = (g * ((1 - wy)[:, None])* (t01 - t00) + g * (wy[:, None]) * (t11 - t10)).sum(axis=1)
            gt = (g * ((1 - wx)[:, None]) * (t10 - t00) + g * (wx[:, None]) * (t11 - t01)).sum(axis=1)
            dgrid = np.stack([gs * (w - 1) / 2.0, gt * (h - 1) / 2.0], axis=-1)
        return dx, dgrid

    return make_op(np.ascontiguousarray(out), (x, grid), bw)


def st(x: Tensor, affine: Tensor) -> Tensor:
    """Spatial transform: warp x by the affine pose onto a same-sized canvas."""
    n, c, h, w = x.shape
    return sample_bilinear(x, grid_generate(affine, h, w))
