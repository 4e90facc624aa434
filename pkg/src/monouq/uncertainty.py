"""Uncertainty estimation strategies for self-supervised depth networks.

Empirical strategies (drop, boot, snap) measure the spread of several
sampled networks; predictive ones (repr, log, self) read an extra output
channel; the Bayesian combinations mix both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import fileio
from .geometry import DEFAULT_MAX_DEPTH, DEFAULT_MIN_DEPTH, DepthMap, ImageFrame, sigmoid_to_depth
from .models import DepthNet, ModelCheckpoint

KINDS = ("post", "drop", "boot", "snap", "repr", "log", "self",
         "boot+log", "boot+self", "snap+log", "snap+self")


@dataclass
class UncertaintyMap:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError("uncertainty map must be 2-D")
        if not np.all(np.isfinite(v)) or (v.size and v.min() < 0):
            raise ValueError("uncertainty must be finite and non-negative")
        self.values = v

    @property
    def shape(self):
        return self.values.shape


@dataclass
class PredictionSet:
    """N sampled predictions, each a depth map with an optional variance."""

    entries: List[Tuple[DepthMap, Optional[UncertaintyMap]]]

    def __post_init__(self):
        if len(self.entries) < 1:
            raise ValueError("a prediction set needs at least one entry")
        shapes = {m.shape for m, _ in self.entries} | {v.shape for _, v in self.entries if v is not None}
        if len(shapes) != 1:
            raise ValueError("all maps in a prediction set must share a shape")
        with_var = sum(v is not None for _, v in self.entries)
        if with_var not in (0, len(self.entries)):
            raise ValueError("variances must be present for all entries or for none")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def has_variances(self) -> bool:
        return self.entries[0][1] is not None

    def means(self) -> np.ndarray:
        return np.stack([np.asarray(m.values, dtype=np.float64) for m, _ in self.entries])

    def variances(self) -> np.ndarray:
        return np.stack([np.asarray(v.values, dtype=np.float64) for _, v in self.entries])

    @property
    def valid_range(self):
        return self.entries[0][0].valid_range


@dataclass(frozen=True)
class SnapshotSchedule:
    lambda0: float
    T: int
    C: int = 20

    def __post_init__(self):
        if self.lambda0 <= 0:
            raise ValueError("lambda0 must be positive")
        if not 1 <= self.C <= self.T:
            raise ValueError("need 1 <= C <= T")

    @property
    def cycle_length(self) -> int:
        return math.ceil(self.T / self.C)

    def cycle_ends(self) -> List[int]:
        """Steps (1-based) closing each of the C cycles."""
        L = self.cycle_length
        return [min((c + 1) * L, self.T) for c in range(self.C)]


def snapshot_lr(schedule: SnapshotSchedule, t: int) -> float:
    """Cosine-annealed learning rate restarting every ``ceil(T / C)`` steps."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside [1, {schedule.T}]")
    L = schedule.cycle_length
    return schedule.lambda0 / 2 * (math.cos(math.pi * ((t - 1) % L) / L) + 1)


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "post"
    N: int = 8
    beta: float = 0.1
    bootstrap_fraction: float = 0.25

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.empirical in ("drop", "boot", "snap") and self.N < 2:
            raise ValueError("ensemble strategies need N >= 2")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0 < self.bootstrap_fraction <= 1:
            raise ValueError("bootstrap_fraction must lie in (0, 1]")

    @property
    def empirical(self) -> Optional[str]:
        head = self.kind.split("+")[0]
        return head if head in ("drop", "boot", "snap") else None

    @property
    def predictive(self) -> Optional[str]:
        tail = self.kind.split("+")[-1]
        return tail if tail in ("repr", "log", "self") else None

    @property
    def is_bayesian(self) -> bool:
        return "+" in self.kind


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------

def _centred(means: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and deviations, computed about the first sample so equal samples give exact zeros."""
    shifted = means - means[0]
    offset = shifted.mean(axis=0)
    return means[0] + offset, shifted - offset


def empirical_moments(prediction_set: PredictionSet) -> Tuple[DepthMap, UncertaintyMap]:
    """Per-pixel mean and population variance of N depth samples."""
    if len(prediction_set) < 2:
        raise ValueError("empirical moments need N >= 2 samples")
    mu, spread = _centred(prediction_set.means())
    return DepthMap(mu, prediction_set.valid_range), UncertaintyMap((spread ** 2).mean(axis=0))


def bayesian_aggregate(prediction_set: PredictionSet) -> Tuple[DepthMap, UncertaintyMap]:
    """Mixture mean and variance: spread of the means plus the mean variance."""
    if not prediction_set.has_variances:
        raise ValueError("bayesian aggregation needs per-entry variances")
    if len(prediction_set) < 2:
        raise ValueError("bayesian aggregation needs N >= 2 samples")
    mu, spread = _centred(prediction_set.means())
    var = (spread ** 2 + prediction_set.variances()).mean(axis=0)
    return DepthMap(mu, prediction_set.valid_range), UncertaintyMap(var)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def repr_loss(u: torch.Tensor, min_reprojection: torch.Tensor, beta: float = 0.1) -> torch.Tensor:
    """``beta * mean|u - F|`` with the reprojection target detached.

    Pixels where the target is not finite (no valid source) are skipped.
    """
    u = torch.as_tensor(u)
    target = torch.as_tensor(min_reprojection)
    if u.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(u.shape)} vs {tuple(target.shape)}")
    target = target.detach()
    keep = torch.isfinite(target)
    if not keep.any():
        return u.sum() * 0.0
    return beta * (u[keep] - target[keep]).abs().mean()


def log_likelihood_loss(residual: torch.Tensor, log_variance: torch.Tensor) -> torch.Tensor:
    """Laplacian-style negative log-likelihood ``mean(r * exp(-u) + u)``."""
    residual = torch.as_tensor(residual)
    log_variance = torch.as_tensor(log_variance)
    if residual.shape != log_variance.shape:
        raise ValueError("residual and log-variance shapes differ")
    if not (torch.isfinite(residual).all() and torch.isfinite(log_variance).all()):
        raise ValueError("log-likelihood inputs must be finite")
    return (residual * torch.exp(-log_variance) + log_variance).mean()


def head_to_uncertainty(raw: torch.Tensor, predictive: str) -> torch.Tensor:
    """Turn the raw uncertainty channel into a non-negative score.

    ``repr`` heads regress the photometric error through a sigmoid; ``log``
    and ``self`` heads predict log-variance and are exponentiated.
    """
    if predictive == "repr":
        return torch.sigmoid(raw)
    return torch.exp(raw)


# --------------------------------------------------------------------------
# inference-time strategies
# --------------------------------------------------------------------------

def _as_net(net: Union[DepthNet, ModelCheckpoint]) -> DepthNet:
    return net.build() if isinstance(net, ModelCheckpoint) else net


def _as_image(image: Union[ImageFrame, torch.Tensor]) -> torch.Tensor:
    return image.to_tensor() if isinstance(image, ImageFrame) else image


def predict_depth(net: DepthNet, image: torch.Tensor, d_min: float = DEFAULT_MIN_DEPTH,
                  d_max: float = DEFAULT_MAX_DEPTH, sample_dropout: bool = False,
                  generator: Optional[torch.Generator] = None):
    """Single forward: full resolution depth and raw uncertainty channel."""
    with torch.no_grad():
        out = net(image, sample_dropout=sample_dropout, generator=generator)
    return sigmoid_to_depth(out["disp"][0], d_min, d_max), out["uncertainty"]


def _to_maps(depth: torch.Tensor, unc: torch.Tensor, d_min: float, d_max: float):
    d = depth[0, 0].double().numpy().clip(d_min, d_max)
    return DepthMap(d, (d_min, d_max)), UncertaintyMap(unc[0, 0].double().numpy().clip(min=0))


def post_uncertainty(net: Union[DepthNet, ModelCheckpoint], image: Union[ImageFrame, torch.Tensor],
                     d_min: float = DEFAULT_MIN_DEPTH, d_max: float = DEFAULT_MAX_DEPTH):
    """Flip-consistency uncertainty from two forwards (image and its mirror).

    Depth is the average of the two predictions, uncertainty their absolute
    difference.
    """
    net = _as_net(net)
    x = _as_image(image)
    d, _ = predict_depth(net, x, d_min, d_max)
    d_flip, _ = predict_depth(net, torch.flip(x, dims=[-1]), d_min, d_max)
    d_back = torch.flip(d_flip, dims=[-1])
    return _to_maps((d + d_back) / 2, (d - d_back).abs(), d_min, d_max)


def dropout_uncertainty(net: Union[DepthNet, ModelCheckpoint], image, N: int = 8, seed: int = 0,
                        d_min: float = DEFAULT_MIN_DEPTH, d_max: float = DEFAULT_MAX_DEPTH):
    """Monte Carlo dropout: N stochastic forwards reduced by ``empirical_moments``."""
    net = _as_net(net)
    x = _as_image(image)
    generator = torch.Generator().manual_seed(seed)
    entries = []
    for _ in range(N):
        d, _ = predict_depth(net, x, d_min, d_max, sample_dropout=True, generator=generator)
        entries.append((DepthMap(d[0, 0].double().numpy().clip(d_min, d_max), (d_min, d_max)), None))
    return empirical_moments(PredictionSet(entries))


def predictive_uncertainty(net: Union[DepthNet, ModelCheckpoint], image, predictive: str,
                           d_min: float = DEFAULT_MIN_DEPTH, d_max: float = DEFAULT_MAX_DEPTH):
    """One forward reading the uncertainty head (repr, log or self)."""
    net = _as_net(net)
    d, raw = predict_depth(net, _as_image(image), d_min, d_max)
    if raw is None:
        raise ValueError("network has no uncertainty head")
    return _to_maps(d, head_to_uncertainty(raw, predictive), d_min, d_max)


def ensemble_uncertainty(nets: Sequence[Union[DepthNet, ModelCheckpoint]], image,
                         predictive: Optional[str] = None,
                         d_min: float = DEFAULT_MIN_DEPTH, d_max: float = DEFAULT_MAX_DEPTH):
    """One forward per member, then empirical or Bayesian aggregation.

    With ``predictive`` set (``log`` or ``self``) every member contributes its
    predicted variance and the mixture moments are returned.
    """
    x = _as_image(image)
    entries = []
    for net in nets:
        net = _as_net(net)
        d, raw = predict_depth(net, x, d_min, d_max)
        depth = DepthMap(d[0, 0].double().numpy().clip(d_min, d_max), (d_min, d_max))
        var = None
        if predictive is not None:
            var = UncertaintyMap(head_to_uncertainty(raw, predictive)[0, 0].double().numpy())
        entries.append((depth, var))
    prediction_set = PredictionSet(entries)
    if predictive is not None:
        return bayesian_aggregate(prediction_set)
    return empirical_moments(prediction_set)


def self_teaching_targets(teacher: Optional[ModelCheckpoint], dataset, out_dir=None,
                          d_min: float = DEFAULT_MIN_DEPTH, d_max: float = DEFAULT_MAX_DEPTH,
                          batch_size: int = 8) -> Dict[str, np.ndarray]:
    """Teacher depth for every image of ``dataset``, optionally persisted.

    Files go to ``out_dir/<teacher hash>/<image id>.uqdm``.  Returns a mapping
    image id -> float32 depth map.
    """
    if teacher is None:
        raise ValueError("self-teaching needs a trained teacher checkpoint")
    net = teacher.build()
    images = torch.from_numpy(np.ascontiguousarray(dataset.images["left"].transpose(0, 3, 1, 2)))
    targets: Dict[str, np.ndarray] = {}
    for start in range(0, len(dataset), batch_size):
        d, _ = predict_depth(net, images[start:start + batch_size], d_min, d_max)
        for k, depth in enumerate(d[:, 0].numpy().astype(np.float32)):
            targets[dataset.ids[start + k]] = depth
    if out_dir is not None:
        store = Path(out_dir) / fileio.sha256_bytes(teacher.to_bytes())[:16]
        store.mkdir(parents=True, exist_ok=True)
        for image_id, depth in targets.items():
            fileio.write_map(store / f"{image_id}.uqdm", depth)
    return targets
