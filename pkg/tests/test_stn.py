"""Spatial transformer: pose constraint, grid math, bilinear sampling."""

import numpy as np
import pytest

import lrgan.diffcore as dc
from lrgan import stn
from lrgan.diffcore import gradient_check
from lrgan.errors import ConfigError


def t64(data, requires_grad=False):
    return dc.Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# constrain_pose
# ---------------------------------------------------------------------------

def test_constrain_pose_at_zero_raw():
    pose = stn.constrain_pose(t64(np.zeros((1, 6))), s_min=1.2).data[0]
    expected_scale = 1.2 + np.log(2.0)
    assert pose[0] == pytest.approx(expected_scale, rel=1e-12)
    assert pose[4] == pytest.approx(expected_scale, rel=1e-12)
    assert pose[1] == pose[2] == pose[3] == pose[5] == 0.0


def test_constrain_pose_scale_floor():
    raw = np.zeros((1, 6))
    raw[0, 0] = raw[0, 4] = -40.0  # softplus underflows to 0
    pose = stn.constrain_pose(t64(raw), s_min=1.2).data[0]
    assert pose[0] == pytest.approx(1.2, abs=1e-12)
    assert pose[4] == pytest.approx(1.2, abs=1e-12)


def test_constrain_pose_scale_gradient_half_at_zero():
    raw = dc.Tensor(np.zeros((1, 6)), requires_grad=True, dtype=np.float64)
    pose = stn.constrain_pose(raw, s_min=1.2)
    dc.backward(pose[:, 0:1].sum())
    assert raw.grad[0, 0] == pytest.approx(0.5, rel=1e-12)


def test_constrain_pose_translation_bounded_by_scale():
    rng = np.random.default_rng(0)
    pose = stn.constrain_pose(t64(rng.normal(scale=3.0, size=(64, 6))), s_min=1.2).data
    assert np.all(pose[:, 0] >= 1.2) and np.all(pose[:, 4] >= 1.2)
    assert np.all(np.abs(pose[:, 2]) <= pose[:, 0] - 1.0)
    assert np.all(np.abs(pose[:, 5]) <= pose[:, 4] - 1.0)
    assert np.isfinite(pose).all()


def test_constrain_pose_rejects_small_s_min():
    with pytest.raises(ConfigError, match="exceed the canvas"):
        stn.constrain_pose(t64(np.zeros((1, 6))), s_min=0.9)


def test_constrain_pose_gradients():
    rng = np.random.default_rng(1)
    report = gradient_check(lambda r: stn.constrain_pose(r, 1.2),
                            [rng.normal(size=(4, 6))], tolerance=1e-6)
    assert report.passed


# ---------------------------------------------------------------------------
# grid_generate
# ---------------------------------------------------------------------------

def test_identity_grid_is_canonical_mesh():
    grid = stn.grid_generate(stn.identity_pose(1, np.float64), 5, 7).data[0]
    xs = np.linspace(-1, 1, 7)
    ys = np.linspace(-1, 1, 5)
    np.testing.assert_allclose(grid[..., 0], np.broadcast_to(xs, (5, 7)), atol=1e-15)
    np.testing.assert_allclose(grid[..., 1], np.broadcast_to(ys[:, None], (5, 7)), atol=1e-15)


def test_pure_scale_maps_corner_outside():
    pose = t64([[2.0, 0, 0, 0, 2.0, 0]])
    grid = stn.grid_generate(pose, 3, 3).data[0]
    np.testing.assert_allclose(grid[2, 2], [2.0, 2.0])
    np.testing.assert_allclose(grid[0, 0], [-2.0, -2.0])


def test_pure_translation_shifts_x():
    pose = t64([[1.0, 0, 0.5, 0, 1.0, 0]])
    grid = stn.grid_generate(pose, 4, 4).data[0]
    base = stn.grid_generate(stn.identity_pose(1, np.float64), 4, 4).data[0]
    np.testing.assert_allclose(grid[..., 0], base[..., 0] + 0.5, atol=1e-15)
    np.testing.assert_allclose(grid[..., 1], base[..., 1], atol=1e-15)


def test_grid_gradient():
    rng = np.random.default_rng(2)
    report = gradient_check(lambda a: stn.grid_generate(a, 4, 6),
                            [rng.normal(size=(3, 6))], tolerance=1e-7)
    assert report.passed


# ---------------------------------------------------------------------------
# sample_bilinear
# ---------------------------------------------------------------------------

def test_sample_center_of_2x2_is_mean():
    img = t64(np.array([[[[0.0, 1.0], [2.0, 3.0]]]]))
    grid = t64(np.zeros((1, 1, 1, 2)))
    assert stn.sample_bilinear(img, grid).data.reshape(()) == pytest.approx(1.5)


def test_sample_at_exact_pixel_location():
    rng = np.random.default_rng(3)
    img = rng.normal(size=(1, 1, 5, 5))
    # pixel (row 3, col 1) in normalized coordinates
    gx = -1 + 2 * 1 / 4
    gy = -1 + 2 * 3 / 4
    grid = t64(np.array(
        [[[[gx, gy]]]]))
    got = stn.sample_bilinear(t64(img), grid).data.reshape(())
    assert got == pytest.approx(img[0, 0, 3, 1], rel=1e-12)


def test_sample_far_outside_is_exactly_zero():
    rng = np.random.default_rng(4)
    img = t64(rng.normal(size=(1, 2, 4, 4)))
    grid = t64(np.full((1, 3, 3, 2), 5.0))
    assert np.all(stn.sample_bilinear(img, grid).data == 0.0)
    grid_neg = t64(np.full((1, 3, 3, 2), -3.0))
    assert np.all(stn.sample_bilinear(img, grid_neg).data == 0.0)


def test_sample_gradients_off_boundary():
    rng = np.random.default_rng(5)
    img = rng.normal(size=(2, 2, 5, 5))
    grid = rng.uniform(-0.8, 0.8, size=(2, 3, 3, 2))
    pix = (grid + 1) * 2.0  # 5-pixel axis -> (W-1)/2 = 2
    frac = pix - np.floor(pix)
    grid = np.where((frac < 0.05) | (frac > 0.95), grid + 0.1, grid)
    report = gradient_check(stn.sample_bilinear, [img, grid], tolerance=1e-4)
    assert report.passed, report.max_rel_errors


# ---------------------------------------------------------------------------
# st composition
# ---------------------------------------------------------------------------

def test_st_identity_reproduces_exactly():
    rng = np.random.default_rng(6)
    img = t64(rng.normal(size=(3, 3, 9, 11)))
    out = stn.st(img, stn.identity_pose(3, np.float64))
    assert np.abs(out.data - img.data).max() < 1e-6


def test_st_scale_two_ones_mask():
    ones = t64(np.ones((1, 1, 17, 17)))
    warped = stn.st(ones, t64([[2.0, 0, 0, 0, 2.0, 0]])).data[0, 0]
    # central half-extent samples inside the source, borders outside
    assert np.all(warped[5:12, 5:12] == 1.0)
    assert np.all(warped[0:3, :] == 0.0) and np.all(warped[:, 0:3] == 0.0)


def test_st_minimum_scale_bounds_occupied_extent():
    rng = np.random.default_rng(7)
    w = 33
    ones = t64(np.ones((8, 1, w, w)))
    raw = rng.normal(size=(8, 6))
    raw[:, 1] = raw[:, 3] = 0.0  # no shear: pure scale + translation
    pose = stn.constrain_pose(t64(raw), s_min=1.2)
    warped = stn.st(ones, pose).data
    for i in range(8):
        cols = np.nonzero(warped[i, 0].any(axis=0))[0]
        rows = np.nonzero(warped[i, 0].any(axis=1))[0]
        # occupied extent <= W/1.2 plus a 2-pixel bilinear fringe
        assert len(cols) <= w / 1.2 + 2
        assert len(rows) <= w / 1.2 + 2


def test_st_zero_padding_conserves_mask_mass():
    rng = np.random.default_rng(8)
    for _ in range(20):
        mask = rng.uniform(size=(1, 1, 15, 15))
        s = rng.uniform(1.0, 3.0, size=2)
        t = rng.uniform(-1.0, 1.0, size=2)
        pose = t64([[s[0], 0.0, t[0], 0.0, s[1], t[1]]])
        warped = stn.st(t64(mask), pose)
        assert warped.data.sum() <= mask.sum() * (1 + 1e-4)


def test_st_shared_grid_bitwise_identical():
    rng = np.random.default_rng(9)
    pose = stn.constrain_pose(t64(rng.normal(size=(2, 6))), 1.2)
    grid_a = stn.grid_generate(pose, 8, 8)
    grid_b = stn.grid_generate(pose, 8, 8)
    assert np.array_equal(grid_a.data, grid_b.data)


def test_st_gradient_flows_to_pose():
    rng = np.random.default_rng(10)
    raw = dc.Tensor(rng.normal(size=(2, 6)), requires_grad=True, dtype=np.float64)
    img = t64(rng.normal(size=(2, 1, 7, 7)))
    out = stn.st(img, stn.constrain_pose(raw, 1.2))
    dc.backward((out * out).sum())
    assert raw.grad is not None and np.abs(raw.grad).max() > 0
