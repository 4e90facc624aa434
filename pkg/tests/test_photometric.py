import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from monouq.photometric import (SSIM_C1, SSIM_C2, LossConfig, masked_mean, min_reprojection,
                                photometric_error, smoothness, ssim)


def _ssim_bruteforce(a, b, window=3):
    """Direct per-pixel SSIM with reflect-padded box windows, channel-averaged (numpy loops)."""
    pad = window // 2
    _, c, h, w = a.shape
    A = np.pad(a[0], ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    B = np.pad(b[0], ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            vals = []
            for k in range(c):
                x = A[k, i:i + window, j:j + window].ravel()
                y = B[k, i:i + window, j:j + window].ravel()
                mx, my = x.mean(), y.mean()
                vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
                cov = ((x - mx) * (y - my)).mean()
                vals.append((2 * mx * my + SSIM_C1) * (2 * cov + SSIM_C2)
                            / ((mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2)))
            out[i, j] = np.mean(vals)
    return out


def _rand(shape, seed):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_ssim_self_similarity_is_one():
    a = _rand((1, 3, 9, 9), 0)
    torch.testing.assert_close(ssim(a, a), torch.ones(1, 1, 9, 9, dtype=torch.float64))


def test_ssim_constant_complements():
    a = torch.full((1, 3, 5, 5), 0.2, dtype=torch.float64)
    b = 1 - a
    expected = (2 * 0.2 * 0.8 + SSIM_C1) / (0.2 ** 2 + 0.8 ** 2 + SSIM_C1)
    torch.testing.assert_close(ssim(a, b), torch.full((1, 1, 5, 5), expected, dtype=torch.float64))
    torch.testing.assert_close(ssim(a, b), ssim(b, a))


def test_ssim_matches_bruteforce_on_random_patches():
    a, b = _rand((1, 3, 7, 7), 1), _rand((1, 3, 7, 7), 2)
    np.testing.assert_allclose(ssim(a, b)[0, 0].numpy(), _ssim_bruteforce(a.numpy(), b.numpy()), atol=1e-12)


@given(st.integers(0, 10_000))
def test_ssim_symmetric(seed):
    a, b = _rand((1, 3, 6, 5), seed), _rand((1, 3, 6, 5), seed + 1)
    torch.testing.assert_close(ssim(a, b), ssim(b, a), rtol=0, atol=1e-15)


def test_photometric_error_identical_is_zero():
    a = _rand((1, 3, 8, 8), 3)
    assert photometric_error(a, a).abs().max() == 0


def test_photometric_error_alpha_zero_is_l1():
    a, b = _rand((1, 3, 8, 8), 4), _rand((1, 3, 8, 8), 5)
    torch.testing.assert_close(photometric_error(a, b, LossConfig(alpha=0.0)), (a - b).abs().mean(1, keepdim=True))


def test_photometric_error_componentwise_oracle():
    a, b = _rand((1, 3, 7, 7), 6), _rand((1, 3, 7, 7), 7)
    s = _ssim_bruteforce(a.numpy(), b.numpy())
    l1 = np.abs(a.numpy() - b.numpy()).mean(axis=1)[0]
    expected = 0.85 * np.clip((1 - s) / 2, 0, 1) + 0.15 * l1
    np.testing.assert_allclose(photometric_error(a, b)[0, 0].numpy(), expected, atol=1e-12)


@given(st.integers(0, 10_000))
def test_photometric_error_non_negative(seed):
    a, b = _rand((1, 3, 6, 6), seed), _rand((1, 3, 6, 6), seed + 7)
    assert (photometric_error(a, b) >= 0).all()


def test_photometric_error_shape_mismatch():
    with pytest.raises(ValueError):
        photometric_error(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=1.5)
    with pytest.raises(ValueError):
        LossConfig(ssim_window=4)


# ------------------------------------------------------------ min reprojection

def test_min_reprojection_singleton():
    e = _rand((1, 1, 4, 4), 8)
    combined, arg = min_reprojection([e])
    torch.testing.assert_close(combined, e)
    assert (arg == 0).all()


def test_min_reprojection_constant_maps():
    combined, arg = min_reprojection([torch.full((3, 3), 2.0), torch.full((3, 3), 5.0)])
    assert (combined == 2.0).all() and (arg == 0).all()


def test_min_reprojection_matches_exhaustive_comparison():
    a, b = _rand((5, 6), 9), _rand((5, 6), 10)
    combined, arg = min_reprojection([a, b])
    for i in range(5):
        for j in range(6):
            lo = a[i, j] if a[i, j] <= b[i, j] else b[i, j]
            assert combined[i, j] == lo
            assert arg[i, j] == (0 if a[i, j] <= b[i, j] else 1)


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_min_reprojection_below_every_input(seed, k):
    maps = [_rand((4, 4), seed + i) for i in range(k)]
    combined, _ = min_reprojection(maps)
    for m in maps:
        assert (combined <= m).all()


def test_min_reprojection_masks_use_inf_sentinel():
    a, b = torch.tensor([[1.0, 4.0]]), torch.tensor([[2.0, 3.0]])
    combined, arg = min_reprojection([a, b], [torch.tensor([[False, True]]), torch.tensor([[False, False]])])
    assert torch.isinf(combined[0, 0]) and combined[0, 1] == 4.0
    assert masked_mean(combined) == 4.0


def test_min_reprojection_errors():
    with pytest.raises(ValueError):
        min_reprojection([])
    with pytest.raises(ValueError):
        min_reprojection([torch.zeros(2, 2), torch.zeros(3, 3)])


# ------------------------------------------------------------------ smoothness

def test_smoothness_constant_depth_is_zero():
    assert smoothness(torch.full((1, 1, 6, 6), 0.3), torch.rand(1, 3, 6, 6)) == 0


def test_smoothness_weight_zero():
    assert smoothness(torch.rand(1, 1, 6, 6), torch.rand(1, 3, 6, 6), weight=0.0) == 0


def test_smoothness_linear_ramp_hand_value():
    # 1x8 strip, disparity 1..8: mean 4.5, every normalised step is 1/4.5,
    # constant image -> no damping; the single-row y axis contributes nothing.
    disp = torch.arange(1, 9, dtype=torch.float64).reshape(1, 1, 1, 8)
    image = torch.full((1, 3, 1, 8), 0.5, dtype=torch.float64)
    assert smoothness(disp, image, weight=1e-3).item() == pytest.approx(1e-3 / 4.5, rel=1e-6)


def test_smoothness_edges_damp_penalty():
    disp = torch.arange(1, 9, dtype=torch.float64).reshape(1, 1, 1, 8)
    flat = torch.zeros(1, 3, 1, 8, dtype=torch.float64)
    edgy = torch.arange(8, dtype=torch.float64).repeat(1, 3, 1, 1)
    assert smoothness(disp, edgy) < smoothness(disp, flat)


# -------------------------------------------------------------- gradients

def _central_fd(f, x, eps=1e-6):
    g = torch.zeros_like(x)
    with torch.no_grad():
        for i in range(x.numel()):
            xp, xm = x.clone(), x.clone()
            xp.view(-1)[i] += eps
            xm.view(-1)[i] -= eps
            g.view(-1)[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def test_photometric_error_gradient_matches_finite_differences():
    target = _rand((1, 3, 8, 8), 11)
    warped = _rand((1, 3, 8, 8), 12).requires_grad_()

    def f(x):
        return photometric_error(x, target).sum()

    f(warped).backward()
    torch.testing.assert_close(warped.grad, _central_fd(f, warped.detach()), rtol=1e-3, atol=1e-9)


def test_smoothness_gradient_matches_finite_differences():
    image = _rand((1, 3, 8, 8), 13)
    disp = (0.1 + _rand((1, 1, 8, 8), 14)).requires_grad_()

    def f(x):
        return smoothness(x, image, weight=1.0)

    f(disp).backward()
    torch.testing.assert_close(disp.grad, _central_fd(f, disp.detach()), rtol=1e-3, atol=1e-9)
