"""Pinhole camera model and differentiable view synthesis.

Tensor routines operate on batched ``(B, C, H, W)`` layouts and are
differentiable end to end; the dataclass wrappers (``ImageFrame``,
``DepthMap``...) hold single numpy images and validate their invariants.

Pixel ``(u, v)`` is column ``u``, row ``v``; pixel centres sit on integer
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_MIN_DEPTH = 0.1
DEFAULT_MAX_DEPTH = 100.0

# Slack on the image bounds when deciding whether a projection is in view.
_BOUNDS_EPS = 1e-3


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for the image resized by ``factor`` (e.g. 0.5 for half size)."""
        return Intrinsics(self.fx * factor, self.fy * factor,
                          (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5,
                          int(round(self.width * factor)), int(round(self.height * factor)))

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                    width=self.width, height=self.height)


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping points of one camera frame into another."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, axis_angle, translation) -> "Pose":
        aa = torch.as_tensor(np.asarray(axis_angle, dtype=np.float64)).reshape(1, 3)
        return cls(axis_angle_to_matrix(aa)[0].numpy(), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self`` applied after ``other``."""
        return Pose.from_matrix(self.matrix() @ other.matrix())

    def to_dict(self) -> dict:
        return dict(rotation=self.rotation.tolist(), translation=self.translation.tolist())

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


@dataclass
class ImageFrame:
    pixels: np.ndarray
    intrinsics: Intrinsics
    pose: Optional[Pose] = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got shape {px.shape}")
        if px.shape[:2] != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(f"image is {px.shape[1]}x{px.shape[0]} but intrinsics say "
                             f"{self.intrinsics.width}x{self.intrinsics.height}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape[:2]

    def to_tensor(self, dtype=torch.float32) -> torch.Tensor:
        """``(1, 3, H, W)`` tensor view of the pixels."""
        return torch.as_tensor(np.ascontiguousarray(self.pixels.transpose(2, 0, 1)), dtype=dtype)[None]


@dataclass
class DepthMap:
    values: np.ndarray
    valid_range: Tuple[float, float] = (DEFAULT_MIN_DEPTH, DEFAULT_MAX_DEPTH)

    def __post_init__(self):
        d_min, d_max = self.valid_range
        if d_min <= 0 or d_max <= d_min:
            raise ValueError("valid_range must satisfy 0 < d_min < d_max")
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {v.shape}")
        if v.size and (v.min() < d_min or v.max() > d_max):
            raise ValueError(f"depth values outside [{d_min}, {d_max}]")
        self.values = v

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def _check_same_size(depth_hw, K: Intrinsics):
    if tuple(depth_hw) != (K.height, K.width):
        raise ValueError(f"map of shape {tuple(depth_hw)} does not match "
                         f"{K.width}x{K.height} intrinsics")


# --------------------------------------------------------------------------
# batched tensor routines
# --------------------------------------------------------------------------

def pixel_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Homogeneous pixel coordinates, shape ``(3, H*W)`` in row-major order."""
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype, device=device),
                          torch.arange(width, dtype=dtype, device=device), indexing="ij")
    return torch.stack([u.reshape(-1), v.reshape(-1), torch.ones(height * width, dtype=dtype, device=device)])


def backproject_tensor(depth: torch.Tensor, inv_K: torch.Tensor) -> torch.Tensor:
    """Lift ``(B, 1, H, W)`` depth to camera points of shape ``(B, 3, H*W)``."""
    b, _, h, w = depth.shape
    rays = inv_K @ pixel_grid(h, w, depth.dtype, depth.device)
    return rays * depth.reshape(b, 1, h * w)


def project_tensor(points: torch.Tensor, K: torch.Tensor, T: Optional[torch.Tensor] = None,
                   eps: float = 1e-7) -> Tuple[torch.Tensor, torch.Tensor]:
    """Transform ``(B, 3, N)`` points by ``T`` and project with ``K``.

    Returns pixel coordinates ``(B, 2, N)`` and camera depth ``(B, 1, N)``.
    """
    if T is not None:
        points = T[:, :3, :3] @ points + T[:, :3, 3:]
    cam = K @ points
    z = cam[:, 2:3]
    return cam[:, :2] / z.clamp(min=eps), z


def warp_tensor(source: torch.Tensor, depth: torch.Tensor, T: torch.Tensor,
                K_target: torch.Tensor, K_source: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Synthesise the target view by sampling ``source`` through ``depth``.

    ``depth`` lives in the target frame and ``T`` (``(B, 4, 4)``) maps target
    camera points into the source camera.  Sampling is bilinear with border
    clamping; the returned mask flags pixels whose projection lands inside
    the source image in front of the camera.
    """
    b, _, h, w = depth.shape
    hs, ws = source.shape[-2:]
    points = backproject_tensor(depth, torch.linalg.inv(K_target))
    pix, z = project_tensor(points, K_source, T)
    x, y = pix[:, 0], pix[:, 1]
    mask = ((x > -_BOUNDS_EPS) & (x < ws - 1 + _BOUNDS_EPS)
            & (y > -_BOUNDS_EPS) & (y < hs - 1 + _BOUNDS_EPS) & (z[:, 0] > 1e-3))
    grid = torch.stack([2.0 * x / (ws - 1) - 1.0, 2.0 * y / (hs - 1) - 1.0], dim=-1).reshape(b, h, w, 2)
    warped = F.grid_sample(source, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return warped, mask.reshape(b, 1, h, w)


def axis_angle_to_matrix(axis_angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula ``I + A K + B K^2`` for a batch of ``(B, 3)`` rotation vectors.

    ``K`` is the skew matrix of the unnormalised vector; ``A = sin t / t`` and
    ``B = (1 - cos t) / t^2`` switch to their Taylor series near ``t = 0``
    so both values and gradients stay finite.
    """
    theta2 = (axis_angle * axis_angle).sum(dim=1, keepdim=True)[:, :, None]
    small = theta2 < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    A = torch.where(small, 1 - theta2 / 6, torch.sin(theta) / theta)
    B = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(theta)) / safe2)
    x, y, z = axis_angle[:, 0], axis_angle[:, 1], axis_angle[:, 2]
    zero = torch.zeros_like(x)
    K = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=1).reshape(-1, 3, 3)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device).expand_as(K)
    return eye + A * K + B * (K @ K)


def pose_to_matrix(axis_angle: torch.Tensor, translation: torch.Tensor) -> torch.Tensor:
    """``(B, 4, 4)`` homogeneous transforms from rotation vectors and translations."""
    R = axis_angle_to_matrix(axis_angle)
    bottom = torch.zeros(R.shape[0], 1, 4, dtype=R.dtype, device=R.device)
    bottom[:, 0, 3] = 1.0
    return torch.cat([torch.cat([R, translation[:, :, None]], dim=2), bottom], dim=1)


def sigmoid_to_depth(sigmoid: torch.Tensor, d_min: float = DEFAULT_MIN_DEPTH,
                     d_max: float = DEFAULT_MAX_DEPTH) -> torch.Tensor:
    """Map network sigmoid output to depth through a bounded inverse-depth range."""
    a = 1.0 / d_min - 1.0 / d_max
    return 1.0 / (a * sigmoid + 1.0 / d_max)


def depth_to_sigmoid(depth, d_min: float = DEFAULT_MIN_DEPTH, d_max: float = DEFAULT_MAX_DEPTH):
    a = 1.0 / d_min - 1.0 / d_max
    return (1.0 / depth - 1.0 / d_max) / a


# --------------------------------------------------------------------------
# single-image wrappers
# --------------------------------------------------------------------------

def backproject(depth: DepthMap, K: Intrinsics) -> np.ndarray:
    """Camera-frame 3D point for every pixel, shape ``(H, W, 3)``."""
    _check_same_size(depth.shape, K)
    d = np.asarray(depth.values, dtype=np.float64)
    v, u = np.indices(d.shape, dtype=np.float64)
    return np.stack([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d], axis=-1)


def project(points: np.ndarray, K: Intrinsics, pose: Optional[Pose] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Project ``(..., 3)`` points; returns ``(..., 2)`` pixel coordinates and depth."""
    p = np.asarray(points, dtype=np.float64)
    if pose is not None:
        p = p @ pose.rotation.T + pose.translation
    z = p[..., 2]
    uv = np.stack([K.fx * p[..., 0] / z + K.cx, K.fy * p[..., 1] / z + K.cy], axis=-1)
    return uv, z


def warp(source: ImageFrame, depth: DepthMap, relative_pose: Pose,
         K_target: Intrinsics, K_source: Intrinsics) -> Tuple[ImageFrame, np.ndarray]:
    """Reconstruct the target view from ``source`` given target-frame depth.

    ``relative_pose`` maps target camera coordinates to source camera
    coordinates.  Returns the warped frame and an ``(H, W)`` validity mask.
    """
    _check_same_size(depth.shape, K_target)
    _check_same_size(source.shape, K_source)
    if source.intrinsics != K_source:
        raise ValueError("source frame intrinsics differ from K_source")
    dtype = torch.float64
    d = torch.as_tensor(np.asarray(depth.values), dtype=dtype)[None, None]
    T = torch.as_tensor(relative_pose.matrix(), dtype=dtype)[None]
    Kt = torch.as_tensor(K_target.matrix(), dtype=dtype)[None]
    Ks = torch.as_tensor(K_source.matrix(), dtype=dtype)[None]
    with torch.no_grad():
        warped, mask = warp_tensor(source.to_tensor(dtype), d, T, Kt, Ks)
    pixels = warped[0].permute(1, 2, 0).numpy().clip(0.0, 1.0)
    return ImageFrame(pixels, K_target, source.pose), mask[0, 0].numpy()


def disparity_to_depth(sigmoid_output, d_min: float = DEFAULT_MIN_DEPTH,
                       d_max: float = DEFAULT_MAX_DEPTH) -> DepthMap:
    if d_min <= 0 or d_max <= d_min:
        raise ValueError("need 0 < d_min < d_max")
    s = np.asarray(sigmoid_output, dtype=np.float64)
    if s.size and (s.min() < 0 or s.max() > 1):
        raise ValueError("sigmoid output must lie in [0, 1]")
    depth = 1.0 / ((1.0 / d_min - 1.0 / d_max) * s + 1.0 / d_max)
    return DepthMap(np.clip(depth, d_min, d_max), (d_min, d_max))
