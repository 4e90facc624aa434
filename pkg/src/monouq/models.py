"""Compact depth encoder-decoder, pose regressor and checkpoint files."""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import ImageFrame, pose_to_matrix


@dataclass(frozen=True)
class DepthNetConfig:
    encoder_widths: Tuple[int, ...] = (16, 32, 64, 128)
    dropout_p: float = 0.2
    predict_uncertainty: bool = False
    scales: int = 4

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if not 1 <= self.scales <= len(self.encoder_widths):
            raise ValueError("scales must be between 1 and the encoder depth")

    @property
    def divisor(self) -> int:
        return 2 ** len(self.encoder_widths)


@dataclass(frozen=True)
class PoseNetConfig:
    encoder_widths: Tuple[int, ...] = (16, 32, 64, 128)

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))


DISP_BIAS_INIT = -4.0


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="reflect")


def sampled_dropout(x: torch.Tensor, p: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    """Inverted dropout drawing its mask from an explicit generator."""
    if p == 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


class DepthNet(nn.Module):
    """U-Net style depth network with sigmoid disparity heads at several scales.

    With ``predict_uncertainty`` a single extra channel is predicted in
    parallel to the full resolution disparity.  Dropout, when enabled, is
    applied after every decoder convolution.
    """

    def __init__(self, config: DepthNetConfig = DepthNetConfig()):
        super().__init__()
        self.config = config
        widths = config.encoder_widths
        self.encoder = nn.ModuleList()
        cin = 3
        for w in widths:
            self.encoder.append(nn.ModuleList([_conv(cin, w, stride=2), _conv(w, w)]))
            cin = w
        dec = [max(w // 2, 8) for w in widths]
        self.up_convs = nn.ModuleList()
        self.merge_convs = nn.ModuleList()
        for i in reversed(range(len(widths))):
            self.up_convs.append(_conv(cin, dec[i]))
            skip = widths[i - 1] if i > 0 else 0
            self.merge_convs.append(_conv(dec[i] + skip, dec[i]))
            cin = dec[i]
        self.disp_heads = nn.ModuleList(_conv(dec[s], 1) for s in range(config.scales))
        # Start near a few metres: at sigmoid 0.5 (0.2 m) small images warp
        # almost entirely out of view and the photometric loss has no gradient.
        for head in self.disp_heads:
            nn.init.constant_(head.bias, DISP_BIAS_INIT)
        self.uncertainty_head = _conv(dec[0], 1) if config.predict_uncertainty else None
        self.forward_calls = 0

    def forward(self, image: torch.Tensor, sample_dropout: bool = False,
                generator: Optional[torch.Generator] = None) -> Dict[str, object]:
        """Returns ``{"disp": [full-res, 1/2, ...], "uncertainty": tensor or None}``."""
        self.forward_calls += 1
        div = self.config.divisor
        if image.shape[-1] % div or image.shape[-2] % div:
            raise ValueError(f"image size {tuple(image.shape[-2:])} not divisible by {div}")
        if min(image.shape[-2:]) < 2 * div:
            # reflection padding needs at least 2x2 features at the bottleneck
            raise ValueError(f"image size {tuple(image.shape[-2:])} below the minimum {2 * div}")
        p = self.config.dropout_p if sample_dropout else 0.0

        x = (image - 0.45) / 0.225
        skips = []
        for down, conv in self.encoder:
            x = F.elu(conv(F.elu(down(x))))
            skips.append(x)

        n = len(skips)
        disps: Dict[int, torch.Tensor] = {}
        for j, (up, merge) in enumerate(zip(self.up_convs, self.merge_convs)):
            level = n - 1 - j
            x = sampled_dropout(F.elu(up(x)), p, generator)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if level > 0:
                x = torch.cat([x, skips[level - 1]], dim=1)
            x = sampled_dropout(F.elu(merge(x)), p, generator)
            if level < self.config.scales:
                disps[level] = torch.sigmoid(self.disp_heads[level](x))
        uncertainty = self.uncertainty_head(x) if self.uncertainty_head is not None else None
        return {"disp": [disps[s] for s in range(self.config.scales)], "uncertainty": uncertainty}


class PoseNet(nn.Module):
    """Regresses a 6-DoF relative pose from two stacked frames."""

    def __init__(self, config: PoseNetConfig = PoseNetConfig()):
        super().__init__()
        self.config = config
        layers: List[nn.Module] = []
        cin = 6
        for w in config.encoder_widths:
            layers += [_conv(cin, w, stride=2), nn.ELU()]
            cin = w
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 6, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, target: torch.Tensor, source: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Axis-angle ``(B, 3)`` and translation ``(B, 3)`` mapping target to source camera."""
        x = torch.cat([target, source], dim=1)
        out = 0.01 * self.head(self.encoder((x - 0.45) / 0.225)).mean(dim=(2, 3))
        return out[:, :3], out[:, 3:]

    def matrix(self, target: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        return pose_to_matrix(*self(target, source))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_CONFIG_TYPES = {"depth": DepthNetConfig, "pose": PoseNetConfig}


@dataclass
class ModelCheckpoint:
    weights: "OrderedDict[str, torch.Tensor]"
    config: Union[DepthNetConfig, PoseNetConfig]
    training_step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "depth" if isinstance(self.config, DepthNetConfig) else "pose"

    @classmethod
    def from_module(cls, module: nn.Module, training_step: int = 0, seed: int = 0, **extra) -> "ModelCheckpoint":
        weights = OrderedDict((k, v.detach().clone()) for k, v in module.state_dict().items())
        return cls(weights, module.config, training_step, seed, dict(extra))

    def build(self) -> nn.Module:
        net = DepthNet(self.config) if self.kind == "depth" else PoseNet(self.config)
        expected = net.state_dict()
        if list(expected) != list(self.weights) or any(
                expected[k].shape != self.weights[k].shape for k in expected):
            raise ValueError("checkpoint weights do not match the network configuration")
        net.load_state_dict(self.weights)
        net.eval()
        return net

    def to_bytes(self) -> bytes:
        return b"".join(v.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
                        for v in self.weights.values())

    def save(self, path: Union[str, Path]) -> Path:
        """Write ``<path>.bin`` (raw float32 weights) and ``<path>.json``; returns the json path."""
        path = Path(path)
        blob = self.to_bytes()
        bin_path = path.with_suffix(".bin")
        bin_path.write_bytes(blob)
        meta = {
            "kind": self.kind,
            "config": asdict(self.config),
            "training_step": self.training_step,
            "seed": self.seed,
            "tensors": [[k, list(v.shape)] for k, v in self.weights.items()],
            "weights_file": bin_path.name,
            "sha256": hashlib.sha256(blob).hexdigest(),
            "extra": self.extra,
        }
        json_path = path.with_suffix(".json")
        json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return json_path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelCheckpoint":
        json_path = Path(path).with_suffix(".json")
        meta = json.loads(json_path.read_text())
        blob = (json_path.parent / meta["weights_file"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
            raise ValueError(f"checkpoint {json_path} is corrupt (hash mismatch)")
        flat = np.frombuffer(blob, dtype="<f4")
        weights: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        offset = 0
        for name, shape in meta["tensors"]:
            n = int(np.prod(shape)) if shape else 1
            if offset + n > flat.size:
                raise ValueError(f"checkpoint {json_path} is truncated")
            weights[name] = torch.from_numpy(flat[offset:offset + n].astype(np.float32).reshape(shape))
            offset += n
        if offset != flat.size:
            raise ValueError(f"checkpoint {json_path} has trailing data")
        config = _CONFIG_TYPES[meta["kind"]](**meta["config"])
        return cls(weights, config, meta["training_step"], meta["seed"], meta.get("extra", {}))


def depth_forward(image: Union[ImageFrame, torch.Tensor], weights: ModelCheckpoint,
                  sample_dropout: bool = False, seed: int = 0):
    """One forward pass of a depth checkpoint.

    Returns the list of per-scale sigmoid disparity tensors and the raw
    uncertainty channel (``None`` without an uncertainty head).
    """
    if weights.kind != "depth":
        raise ValueError("not a depth network checkpoint")
    net = weights.build()
    x = image.to_tensor() if isinstance(image, ImageFrame) else image
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out = net(x, sample_dropout=sample_dropout, generator=generator)
    return out["disp"], out["uncertainty"]


def pose_forward(frame_a: Union[ImageFrame, torch.Tensor], frame_b: Union[ImageFrame, torch.Tensor],
                 weights: ModelCheckpoint) -> np.ndarray:
    """Six pose parameters ``[axis_angle, translation]`` mapping frame_a to frame_b."""
    if weights.kind != "pose":
        raise ValueError("not a pose network checkpoint")
    a = frame_a.to_tensor() if isinstance(frame_a, ImageFrame) else frame_a
    b = frame_b.to_tensor() if isinstance(frame_b, ImageFrame) else frame_b
    if a.shape != b.shape:
        raise ValueError("pose frames must share dimensions")
    net = weights.build()
    with torch.no_grad():
        aa, t = net(a, b)
    return torch.cat([aa, t], dim=1)[0].numpy()
