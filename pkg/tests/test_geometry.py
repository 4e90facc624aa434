import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from monouq.geometry import (DepthMap, ImageFrame, Intrinsics, Pose, backproject, disparity_to_depth,
                             project, sigmoid_to_depth, depth_to_sigmoid, warp, warp_tensor)


def _K(fx=100.0, fy=100.0, cx=50.0, cy=50.0, w=64, h=64):
    return Intrinsics(fx, fy, cx, cy, w, h)


def _ramp_image(h, w):
    u = np.tile(np.arange(w, dtype=np.float64) / (w - 1), (h, 1))
    return np.repeat(u[..., None], 3, axis=2)


# -------------------------------------------------------------- backproject

def test_backproject_principal_point_ray():
    K = _K()
    pts = backproject(DepthMap(np.full((64, 64), 5.0)), K)
    np.testing.assert_allclose(pts[50, 50], [0.0, 0.0, 5.0], atol=1e-12)


def test_backproject_unit_offset_at_unit_depth():
    K = Intrinsics(10.0, 10.0, 5.0, 5.0, 16, 16)
    pts = backproject(DepthMap(np.ones((16, 16))), K)
    np.testing.assert_allclose(pts[5, 15], [1.0, 0.0, 1.0], atol=1e-12)


def test_backproject_hand_arithmetic():
    # (10 - 50) / 100 * 2 = -0.8 ; (20 - 50) / 100 * 2 = -0.6
    pts = backproject(DepthMap(np.full((64, 64), 2.0)), _K())
    np.testing.assert_allclose(pts[20, 10], [-0.8, -0.6, 2.0], atol=1e-12)


def test_backproject_rejects_size_mismatch():
    with pytest.raises(ValueError):
        backproject(DepthMap(np.ones((8, 8))), _K())


@given(fx=st.floats(20, 200), fy=st.floats(20, 200), cx=st.floats(0, 31), cy=st.floats(0, 23),
       seed=st.integers(0, 10_000))
def test_backproject_project_round_trip(fx, fy, cx, cy, seed):
    K = Intrinsics(fx, fy, cx, cy, 32, 24)
    depth = np.random.default_rng(seed).uniform(0.5, 80.0, (24, 32))
    uv, z = project(backproject(DepthMap(depth), K), K)
    v, u = np.indices((24, 32))
    assert np.abs(uv[..., 0] - u).max() < 1e-6
    assert np.abs(uv[..., 1] - v).max() < 1e-6
    np.testing.assert_allclose(z, depth, rtol=1e-12)


# --------------------------------------------------------------------- warp

def test_identity_warp_reproduces_source():
    rng = np.random.default_rng(0)
    K = _K(40, 40, 15.5, 11.5, 32, 24)
    src = ImageFrame(rng.random((24, 32, 3)), K)
    depth = DepthMap(rng.uniform(1, 30, (24, 32)))
    warped, mask = warp(src, depth, Pose.identity(), K, K)
    assert mask.all()
    assert np.abs(warped.pixels - src.pixels)[mask].max() <= 1e-6


def test_stereo_shift_equals_closed_form_disparity():
    h, w = 16, 40
    K = Intrinsics(50.0, 50.0, 19.5, 7.5, w, h)
    b, d = 0.2, 4.0
    shift = K.fx * b / d                                 # 2.5 px
    src = ImageFrame(_ramp_image(h, w), K)
    # target (left) points move to x - b in the right camera
    warped, mask = warp(src, DepthMap(np.full((h, w), d)), Pose(np.eye(3), [-b, 0, 0]), K, K)
    u = np.arange(w)
    expected = (u - shift) / (w - 1)
    assert mask[:, :3].sum() == 0 and mask[:, 3:].all()
    np.testing.assert_allclose(warped.pixels[:, 3:, 0], np.tile(expected[3:], (h, 1)), atol=1e-6)


def test_warp_off_image_masks_everything():
    K = _K(40, 40, 15.5, 11.5, 32, 24)
    src = ImageFrame(np.random.default_rng(1).random((24, 32, 3)), K)
    _, mask = warp(src, DepthMap(np.full((24, 32), 3.0)), Pose(np.eye(3), [1000.0, 0, 0]), K, K)
    assert not mask.any()


def test_warp_rejects_mismatched_sizes():
    K = _K(40, 40, 15.5, 11.5, 32, 24)
    K2 = _K(40, 40, 15.5, 11.5, 16, 24)
    src = ImageFrame(np.zeros((24, 16, 3)), K2)
    with pytest.raises(ValueError):
        warp(src, DepthMap(np.full((24, 32), 3.0)), Pose.identity(), K, K)


def _depth_gradient_check(seed=0):
    """Central finite differences of mean warped intensity w.r.t. every depth value."""
    g = torch.Generator().manual_seed(seed)
    h = w = 8
    v, u = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64),
                          indexing="ij")
    source = torch.stack([torch.sin(0.9 * u + 0.3 * v), torch.cos(0.7 * u - 0.5 * v),
                          torch.sin(0.4 * u * v / 8 + 1.0)])[None] * 0.4 + 0.5
    depth = (2.0 + 3.0 * torch.rand(1, 1, h, w, generator=g, dtype=torch.float64)).requires_grad_()
    K = torch.tensor([[[10.0, 0, 3.5], [0, 10.0, 3.5], [0, 0, 1]]], dtype=torch.float64)
    T = torch.eye(4, dtype=torch.float64)[None].clone()
    T[0, :3, 3] = torch.tensor([-0.37, 0.11, 0.05], dtype=torch.float64)

    def f(d):
        warped, _ = warp_tensor(source, d, T, K, K)
        return warped.mean()

    f(depth).backward()
    analytic = depth.grad.clone()
    numeric = torch.zeros_like(analytic)
    eps = 1e-6
    with torch.no_grad():
        for i in range(h * w):
            dp, dm = depth.detach().clone(), depth.detach().clone()
            dp.view(-1)[i] += eps
            dm.view(-1)[i] -= eps
            numeric.view(-1)[i] = (f(dp) - f(dm)) / (2 * eps)
    return analytic, numeric


def test_warp_depth_gradient_matches_finite_differences():
    analytic, numeric = _depth_gradient_check()
    assert analytic.abs().max() > 0
    torch.testing.assert_close(analytic, numeric, rtol=1e-3, atol=1e-9)


# ------------------------------------------------------- depth parameterisation

def test_disparity_to_depth_bounds_and_midpoint():
    assert disparity_to_depth(np.zeros((1, 1)), 0.1, 100).values[0, 0] == pytest.approx(100.0)
    assert disparity_to_depth(np.ones((1, 1)), 0.1, 100).values[0, 0] == pytest.approx(0.1)
    mid = disparity_to_depth(np.full((1, 1), 0.5), 0.1, 100).values[0, 0]
    assert mid == pytest.approx(1 / (0.5 * 9.99 + 0.01), rel=1e-12)      # 1 / 5.005


@given(st.lists(st.integers(0, 10 ** 6), min_size=2, max_size=50, unique=True))
def test_disparity_to_depth_strictly_decreasing(values):
    s = np.sort(np.array(values) / 10 ** 6)[None]
    d = disparity_to_depth(s).values[0]
    assert np.all(np.diff(d) < 0)


def test_disparity_to_depth_validates_input():
    with pytest.raises(ValueError):
        disparity_to_depth(np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        disparity_to_depth(np.zeros((2, 2)), 10.0, 1.0)


def test_sigmoid_depth_inverse_pair():
    s = torch.linspace(0, 1, 11, dtype=torch.float64)
    torch.testing.assert_close(depth_to_sigmoid(sigmoid_to_depth(s)), s)


# ---------------------------------------------------------- data types

def test_pose_algebra():
    rng = np.random.default_rng(2)
    a = Pose.from_axis_angle(rng.normal(size=3) * 0.3, rng.normal(size=3))
    b = Pose.from_axis_angle(rng.normal(size=3) * 0.3, rng.normal(size=3))
    np.testing.assert_allclose(a.compose(a.inverse()).matrix(), np.eye(4), atol=1e-12)
    np.testing.assert_allclose(a.compose(b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)
    np.testing.assert_array_equal(Pose.from_dict(a.to_dict()).matrix(), a.matrix())


def test_rotation_near_zero_angle_is_orthonormal():
    for aa in ([0.0, 0.0, 0.0], [1e-9, -2e-9, 3e-9], [1e-3, 0, 0]):
        R = Pose.from_axis_angle(aa, np.zeros(3)).rotation
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-14)
    R = Pose.from_axis_angle([0, 0, np.pi / 2], np.zeros(3)).rotation
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-14)


def test_invalid_types_are_rejected():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Intrinsics(-1.0, 1.0, 0.0, 0.0, 4, 4)
    with pytest.raises(ValueError):
        DepthMap(np.full((2, 2), 500.0))
    with pytest.raises(ValueError):
        ImageFrame(np.full((4, 4, 3), 2.0), Intrinsics(1.0, 1.0, 1.0, 1.0, 4, 4))
