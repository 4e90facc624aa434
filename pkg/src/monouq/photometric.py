"""Self-supervised image reconstruction losses.

All functions take batched ``(B, C, H, W)`` tensors and return per-pixel
``(B, 1, H, W)`` maps unless noted otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.85
    smoothness_weight: float = 1e-3
    ssim_window: int = 3

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.smoothness_weight < 0:
            raise ValueError("smoothness_weight must be non-negative")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be an odd integer >= 3")


def _as_batch(x) -> torch.Tensor:
    if hasattr(x, "to_tensor"):
        return x.to_tensor(torch.float64)
    x = torch.as_tensor(x)
    return x[None] if x.dim() == 3 else x


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def ssim(a, b, window: int = 3) -> torch.Tensor:
    """Per-pixel SSIM averaged over channels, shape ``(B, 1, H, W)``.

    Local statistics are box means over ``window x window`` neighbourhoods
    with reflection padding, so the output keeps the input size.
    """
    a, b = _as_batch(a), _as_batch(b)
    _check_pair(a, b)
    pad = window // 2

    def pool(x):
        return F.avg_pool2d(F.pad(x, (pad, pad, pad, pad), mode="reflect"), window, stride=1)

    mu_a, mu_b = pool(a), pool(b)
    var_a = pool(a * a) - mu_a ** 2
    var_b = pool(b * b) - mu_b ** 2
    cov = pool(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).mean(1, keepdim=True)


def photometric_error(warped, target, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """``alpha * (1 - SSIM) / 2 + (1 - alpha) * L1``, per pixel."""
    warped, target = _as_batch(warped), _as_batch(target)
    _check_pair(warped, target)
    l1 = (warped - target).abs().mean(1, keepdim=True)
    if cfg.alpha == 0:
        return l1
    dssim = ((1 - ssim(warped, target, cfg.ssim_window)) / 2).clamp(0, 1)
    return cfg.alpha * dssim + (1 - cfg.alpha) * l1


def min_reprojection(errors: Sequence[torch.Tensor],
                     masks: Optional[Sequence[torch.Tensor]] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel minimum over K error maps and the index attaining it.

    Where ``masks`` is given, invalid pixels are replaced by ``+inf`` first so
    they never win; a pixel invalid in every source stays ``+inf``.
    """
    if len(errors) == 0:
        raise ValueError("min_reprojection needs at least one error map")
    errors = [torch.as_tensor(e) for e in errors]
    shape = errors[0].shape
    if any(e.shape != shape for e in errors):
        raise ValueError("error maps must share a shape")
    if masks is not None:
        inf = torch.tensor(float("inf"), dtype=errors[0].dtype)
        errors = [torch.where(m, e, inf) for e, m in zip(errors, masks)]
    combined, argmin = torch.stack(errors).min(dim=0)
    return combined, argmin


def masked_mean(loss_map: torch.Tensor) -> torch.Tensor:
    """Mean over finite entries; ``+inf`` sentinels are excluded."""
    finite = torch.isfinite(loss_map)
    if not finite.any():
        return loss_map.new_zeros(())
    return loss_map[finite].mean()


def smoothness(disp, image, weight: float = 1e-3) -> torch.Tensor:
    """Edge-aware first-order smoothness of a mean-normalised map (scalar).

    ``disp`` is ``(B, 1, H, W)`` (or ``(H, W)``) and ``image`` ``(B, 3, H, W)``.
    Gradients along x and y are damped by ``exp(-|dI|)`` and averaged; an
    axis with a single sample contributes nothing.
    """
    disp = torch.as_tensor(disp)
    if disp.dim() == 2:
        disp = disp[None, None]
    image = _as_batch(image).to(disp.dtype)
    if weight == 0:
        return disp.new_zeros(())
    if disp.shape[-2:] != image.shape[-2:]:
        raise ValueError("disparity and image sizes differ")
    d = disp / (disp.mean(dim=(2, 3), keepdim=True) + 1e-7)
    total = disp.new_zeros(())
    if d.shape[-1] > 1:
        gx = (d[..., :, :-1] - d[..., :, 1:]).abs()
        ix = (image[..., :, :-1] - image[..., :, 1:]).abs().mean(1, keepdim=True)
        total = total + (gx * torch.exp(-ix)).mean()
    if d.shape[-2] > 1:
        gy = (d[..., :-1, :] - d[..., 1:, :]).abs()
        iy = (image[..., :-1, :] - image[..., 1:, :]).abs().mean(1, keepdim=True)
        total = total + (gy * torch.exp(-iy)).mean()
    return weight * total
