"""Training and inference for every supervision mode and uncertainty strategy.

Supervision modes:

* ``S``  - stereo pairs with known extrinsics,
* ``M``  - temporal triplets, relative poses regressed by a :class:`PoseNet`,
* ``MS`` - both, pooled into one per-pixel minimum reprojection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from . import fileio
from .datagen import Dataset
from .geometry import (DEFAULT_MAX_DEPTH, DEFAULT_MIN_DEPTH, DepthMap, ImageFrame,
                       sigmoid_to_depth, warp_tensor)
from .models import DepthNet, DepthNetConfig, ModelCheckpoint, PoseNet, PoseNetConfig
from .photometric import LossConfig, masked_mean, min_reprojection, photometric_error, smoothness
from .uncertainty import (SnapshotSchedule, StrategyConfig, UncertaintyMap, dropout_uncertainty,
                          ensemble_uncertainty, log_likelihood_loss, post_uncertainty,
                          predictive_uncertainty, repr_loss, self_teaching_targets, snapshot_lr)

log = logging.getLogger(__name__)

SUPERVISION_SOURCES = {"S": ("right",), "M": ("prev", "next"), "MS": ("right", "prev", "next")}
DROPOUT_P = 0.2


@dataclass(frozen=True)
class TrainConfig:
    supervision: str = "S"
    strategy: StrategyConfig = StrategyConfig("post")
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    schedule: Optional[SnapshotSchedule] = None
    loss: LossConfig = LossConfig()
    encoder_widths: Tuple[int, ...] = (16, 32, 64, 128)
    scales: int = 4
    d_min: float = DEFAULT_MIN_DEPTH
    d_max: float = DEFAULT_MAX_DEPTH
    # Epochs for Self students; defaults to ``epochs``.
    student_epochs: Optional[int] = None
    # Random flips and colour jitter on self-supervised batches.
    augment: bool = True
    # Cycles C of the snapshot schedule when ``schedule`` is not given.
    snapshot_cycles: int = 20

    def __post_init__(self):
        if self.supervision not in SUPERVISION_SOURCES:
            raise ValueError(f"supervision must be one of {sorted(SUPERVISION_SOURCES)}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 1, batch_size >= 1 and lr > 0")
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))

    def depth_config(self, predict_uncertainty: bool = False) -> DepthNetConfig:
        dropout = DROPOUT_P if self.strategy.empirical == "drop" else 0.0
        return DepthNetConfig(self.encoder_widths, dropout, predict_uncertainty, self.scales)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("strategy"), dict):
            d["strategy"] = StrategyConfig(**d["strategy"])
        elif isinstance(d.get("strategy"), str):
            d["strategy"] = StrategyConfig(d["strategy"])
        if d.get("schedule") is not None:
            d["schedule"] = SnapshotSchedule(**d["schedule"])
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossConfig(**d["loss"])
        if "encoder_widths" in d:
            d["encoder_widths"] = tuple(d["encoder_widths"])
        return cls(**d)


@dataclass
class ExperimentManifest:
    config: TrainConfig
    checkpoint_refs: List[dict]
    dataset_hash: str
    metrics_path: str
    root: Optional[Path] = None
    teacher_manifest: Optional[str] = None
    proxy_dir: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "checkpoint_refs": self.checkpoint_refs,
            "dataset_hash": self.dataset_hash,
            "metrics_path": self.metrics_path,
            "teacher_manifest": self.teacher_manifest,
            "proxy_dir": self.proxy_dir,
            "extra": self.extra,
        }

    def save(self, root: Union[str, Path]) -> Path:
        self.root = Path(root)
        return fileio.write_json(self.root / "manifest.json", self.to_dict())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = fileio.read_json(path)
        return cls(TrainConfig.from_dict(d["config"]), d["checkpoint_refs"], d["dataset_hash"],
                   d["metrics_path"], path.parent, d.get("teacher_manifest"), d.get("proxy_dir"),
                   d.get("extra", {}))

    def member_paths(self) -> List[Path]:
        return [self.root / ref["depth"] for ref in self.checkpoint_refs if ref["role"] == "member"]


# --------------------------------------------------------------------------
# losses assembled from a batch
# --------------------------------------------------------------------------

def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


@dataclass
class Batch:
    target: torch.Tensor                 # (B, 3, H, W)
    sources: Dict[str, torch.Tensor]     # view -> (B, 3, H, W)
    poses: Dict[str, torch.Tensor]       # view -> (B, 4, 4), known extrinsics
    K: torch.Tensor                      # (B, 3, 3)
    net_input: Optional[torch.Tensor] = None  # colour-jittered target fed to the network

    @property
    def network_input(self) -> torch.Tensor:
        return self.target if self.net_input is None else self.net_input

    def augmented(self, rng: np.random.Generator) -> "Batch":
        """Random horizontal flips and colour jitter.

        A flip mirrors every view of a sample; the known extrinsics are
        conjugated by the mirror ``diag(-1, 1, 1)`` and ``cx`` is reflected.
        Colour jitter only touches the network input, the photometric loss
        still compares the clean images.
        """
        B, _, _, W = self.target.shape
        flip = torch.from_numpy(rng.random(B) < 0.5)
        M = torch.diag(torch.tensor([-1.0, 1.0, 1.0, 1.0]))

        def mirror(x):
            return torch.where(flip[:, None, None, None], x.flip(-1), x)

        poses = {}
        for v, T in self.poses.items():
            poses[v] = torch.where(flip[:, None, None], M @ T @ M, T)
        K = self.K.clone()
        K[:, 0, 2] = torch.where(flip, (W - 1) - K[:, 0, 2], K[:, 0, 2])
        target = mirror(self.target)
        brightness = torch.from_numpy(rng.uniform(0.8, 1.2, B)).float()[:, None, None, None]
        contrast = torch.from_numpy(rng.uniform(0.8, 1.2, B)).float()[:, None, None, None]
        mean = target.mean(dim=(1, 2, 3), keepdim=True)
        jittered = ((target - mean) * contrast + mean) * brightness
        return Batch(target, {v: mirror(x) for v, x in self.sources.items()}, poses, K,
                     jittered.clamp(0.0, 1.0))

    @classmethod
    def from_dataset(cls, dataset: Dataset, indices: Sequence[int], views: Sequence[str]) -> "Batch":
        idx = np.asarray(indices)
        K = torch.as_tensor(dataset.intrinsics.matrix(), dtype=torch.float32).expand(len(idx), 3, 3)
        return cls(
            target=_to_tensor(dataset.images["left"][idx]),
            sources={v: _to_tensor(dataset.images[v][idx]) for v in views},
            poses={v: torch.as_tensor(dataset.poses[v][idx], dtype=torch.float32) for v in views},
            K=K.contiguous(),
        )


def reprojection_map(batch: Batch, depth: torch.Tensor, supervision: str, cfg: LossConfig,
                     pose_net: Optional[PoseNet] = None) -> torch.Tensor:
    """Per-pixel minimum photometric error over all sources.

    Sources whose projection leaves the image are skipped per pixel.  A pixel
    out of view in every source keeps its border-clamped error rather than
    being dropped; dropping it would reward depths that push everything
    out of view.
    """
    errors, masks = [], []
    for view in SUPERVISION_SOURCES[supervision]:
        source = batch.sources[view]
        if view == "right":
            T = batch.poses[view]
        else:
            T = pose_net.matrix(batch.target, source)
        warped, mask = warp_tensor(source, depth, T, batch.K, batch.K)
        errors.append(photometric_error(warped, batch.target, cfg))
        masks.append(mask)
    combined, _ = min_reprojection(errors, masks)
    fallback, _ = min_reprojection(errors)
    return torch.where(torch.isfinite(combined), combined, fallback)


def photometric_loss_for_depth(batch: Batch, depth: torch.Tensor, supervision: str = "S",
                               cfg: LossConfig = LossConfig(), pose_net: Optional[PoseNet] = None) -> torch.Tensor:
    """Mean minimum-reprojection error of a fixed depth map (e.g. ground truth)."""
    return masked_mean(reprojection_map(batch, depth, supervision, cfg, pose_net))


def _finite_pairs(loss_map: torch.Tensor, u: torch.Tensor):
    keep = torch.isfinite(loss_map)
    return loss_map[keep], u[keep]


def _self_supervised_loss(config: TrainConfig, net: DepthNet, pose_net: Optional[PoseNet], batch: Batch,
                          generator: torch.Generator) -> Tuple[torch.Tensor, float]:
    """Total loss and the full-resolution photometric term for logging."""
    strategy = config.strategy
    out = net(batch.network_input, sample_dropout=strategy.empirical == "drop", generator=generator)
    raw_u = out["uncertainty"]
    h, w = batch.target.shape[-2:]
    total = 0.0
    photometric_log = float("nan")
    for s, disp in enumerate(out["disp"]):
        disp_full = disp if s == 0 else F.interpolate(disp, size=(h, w), mode="bilinear", align_corners=False)
        depth = sigmoid_to_depth(disp_full, config.d_min, config.d_max)
        combined = reprojection_map(batch, depth, config.supervision, config.loss, pose_net)
        if s == 0:
            photometric_log = float(masked_mean(combined.detach()))
        if strategy.predictive == "log":
            # The likelihood takes the place of the plain photometric term.
            r, u = _finite_pairs(combined, raw_u)
            term = log_likelihood_loss(r, u) if r.numel() else combined.new_zeros(())
        else:
            term = masked_mean(combined)
            if strategy.predictive == "repr" and s == 0:
                term = term + repr_loss(torch.sigmoid(raw_u), combined, strategy.beta)
        image_s = batch.target if s == 0 else F.interpolate(batch.target, size=disp.shape[-2:], mode="area")
        term = term + smoothness(disp, image_s, config.loss.smoothness_weight / 2 ** s)
        total = total + term
    return total / len(out["disp"]), photometric_log


def _self_teaching_loss(config: TrainConfig, net: DepthNet, target: torch.Tensor,
                        proxy: torch.Tensor) -> Tuple[torch.Tensor, float]:
    out = net(target)
    h, w = target.shape[-2:]
    total = 0.0
    for s, disp in enumerate(out["disp"]):
        disp_full = disp if s == 0 else F.interpolate(disp, size=(h, w), mode="bilinear", align_corners=False)
        depth = sigmoid_to_depth(disp_full, config.d_min, config.d_max)
        total = total + log_likelihood_loss((depth - proxy).abs(), out["uncertainty"])
    total = total / len(out["disp"])
    return total, float(total.detach())


# --------------------------------------------------------------------------
# single optimisation run
# --------------------------------------------------------------------------

def _member_seed(seed: int, member: int) -> int:
    return int(np.random.SeedSequence([seed, member]).generate_state(1)[0])


def bootstrap_subset(train_indices: Sequence[int], fraction: float, seed: int, member: int) -> List[int]:
    """Random subset (without replacement) reproducible from ``(seed, member)``."""
    rng = np.random.default_rng([seed, member, 0xB007])
    k = max(1, int(round(fraction * len(train_indices))))
    return sorted(int(i) for i in rng.choice(np.asarray(train_indices), size=k, replace=False))


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return math.ceil(n_images / batch_size)


def _run(config: TrainConfig, dataset: Dataset, indices: Sequence[int], seed: int, epochs: int,
         predict_uncertainty: bool, proxy: Optional[np.ndarray] = None,
         schedule: Optional[SnapshotSchedule] = None):
    """Optimise one depth network (plus pose network for M/MS).

    Returns the final depth checkpoint, the pose checkpoint (or ``None``), the
    snapshots taken at cycle ends when ``schedule`` is set, and a log.
    """
    torch.manual_seed(seed)
    net = DepthNet(config.depth_config(predict_uncertainty))
    uses_pose = proxy is None and config.supervision in ("M", "MS")
    pose_net = PoseNet(PoseNetConfig(config.encoder_widths)) if uses_pose else None
    params = list(net.parameters()) + (list(pose_net.parameters()) if pose_net else [])
    optimizer = torch.optim.Adam(params, lr=config.lr)
    generator = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    views = SUPERVISION_SOURCES[config.supervision]
    indices = np.asarray(indices)
    n_steps = epochs * steps_per_epoch(len(indices), config.batch_size)
    if schedule is not None and schedule.T != n_steps:
        raise ValueError(f"snapshot schedule covers {schedule.T} steps but training runs {n_steps}")
    snapshot_steps = set(schedule.cycle_ends()) if schedule is not None else set()

    net.train()
    history: List[float] = []
    snapshots: List[Tuple[ModelCheckpoint, Optional[ModelCheckpoint]]] = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(indices)
        for start in range(0, len(order), config.batch_size):
            step += 1
            chunk = order[start:start + config.batch_size]
            if schedule is not None:
                for group in optimizer.param_groups:
                    group["lr"] = snapshot_lr(schedule, step)
            if proxy is None:
                batch = Batch.from_dataset(dataset, chunk, views)
                if config.augment:
                    batch = batch.augmented(rng)
                loss, logged = _self_supervised_loss(config, net, pose_net, batch, generator)
            else:
                target = _to_tensor(dataset.images["left"][chunk])
                loss, logged = _self_teaching_loss(config, net, target, torch.from_numpy(proxy[chunk])[:, None])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            history.append(logged)
            if step in snapshot_steps:
                snapshots.append((ModelCheckpoint.from_module(net, step, seed),
                                  ModelCheckpoint.from_module(pose_net, step, seed) if pose_net else None))
        log.info("epoch %d/%d  loss %.4f", epoch + 1, epochs, float(np.mean(history[-len(order):])))
    net.eval()
    depth_ckpt = ModelCheckpoint.from_module(net, step, seed)
    pose_ckpt = ModelCheckpoint.from_module(pose_net, step, seed) if pose_net else None
    return depth_ckpt, pose_ckpt, snapshots, history


# --------------------------------------------------------------------------
# strategy orchestration
# --------------------------------------------------------------------------

def _resolve_schedule(config: TrainConfig, n_images: int, epochs: int) -> SnapshotSchedule:
    T = epochs * steps_per_epoch(n_images, config.batch_size)
    if config.schedule is not None:
        return config.schedule
    return SnapshotSchedule(config.lr, T, config.snapshot_cycles)


class _Writer:
    """Collects checkpoints and logs for one experiment directory."""

    def __init__(self, out_dir: Path):
        self.root = Path(out_dir)
        (self.root / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.refs: List[dict] = []
        self.logs: Dict[str, List[float]] = {}

    def add(self, name: str, role: str, depth: ModelCheckpoint, pose: Optional[ModelCheckpoint] = None,
            history: Optional[List[float]] = None, **info):
        ref = {"name": name, "role": role,
               "depth": self._save(depth, name),
               "depth_sha256": fileio.sha256_bytes(depth.to_bytes())}
        if pose is not None:
            ref["pose"] = self._save(pose, name + "_pose")
        ref.update(info)
        self.refs.append(ref)
        if history is not None:
            self.logs[name] = history

    def _save(self, ckpt: ModelCheckpoint, name: str) -> str:
        return ckpt.save(self.root / "checkpoints" / name).relative_to(self.root).as_posix()

    def finish(self, config: TrainConfig, dataset: Dataset, **kw) -> ExperimentManifest:
        metrics = "train_log.json"
        fileio.write_json(self.root / metrics, self.logs)
        manifest = ExperimentManifest(config, self.refs, dataset.content_hash, metrics, **kw)
        manifest.save(self.root)
        return manifest


def train(config: TrainConfig, dataset: Dataset, out_dir) -> ExperimentManifest:
    """Train every network the strategy needs and write ``out_dir/manifest.json``.

    ``self`` strategies run the two-stage pipeline: a baseline teacher in
    ``out_dir/teacher`` and then students via :func:`train_self_teaching`.
    """
    out_dir = Path(out_dir)
    strategy = config.strategy
    if strategy.predictive == "self":
        teacher_cfg = replace(config, strategy=StrategyConfig("post", N=strategy.N))
        teacher = train(teacher_cfg, dataset, out_dir / "teacher")
        return train_self_teaching(teacher, config, dataset, out_dir)

    writer = _Writer(out_dir)
    train_idx = dataset.train_indices
    head = strategy.predictive in ("repr", "log")
    if strategy.empirical == "boot":
        for m in range(strategy.N):
            subset = bootstrap_subset(train_idx, strategy.bootstrap_fraction, config.seed, m)
            depth, pose, _, hist = _run(config, dataset, subset, _member_seed(config.seed, m),
                                        config.epochs, head)
            writer.add(f"member_{m:02d}", "member", depth, pose, hist, subset=subset)
    elif strategy.empirical == "snap":
        schedule = _resolve_schedule(config, len(train_idx), config.epochs)
        depth, pose, snaps, hist = _run(config, dataset, train_idx, config.seed, config.epochs, head,
                                        schedule=schedule)
        _add_snapshots(writer, snaps, strategy.N, hist)
    else:
        depth, pose, _, hist = _run(config, dataset, train_idx, config.seed, config.epochs, head)
        writer.add("member_00", "member", depth, pose, hist)
    return writer.finish(config, dataset)


def _add_snapshots(writer: _Writer, snaps, N: int, history: List[float]):
    if N > len(snaps):
        raise ValueError(f"asked for {N} snapshots but training produced {len(snaps)}")
    first_kept = len(snaps) - N
    for c, (depth, pose) in enumerate(snaps):
        role = "member" if c >= first_kept else "snapshot"
        writer.add(f"snapshot_{c:02d}", role, depth, pose, history if c == len(snaps) - 1 else None,
                   step=depth.training_step)


def train_self_teaching(teacher_manifest: Union[ExperimentManifest, str, Path], config: TrainConfig,
                        dataset: Dataset, out_dir) -> ExperimentManifest:
    """Distil a trained teacher into student(s) with an uncertainty head.

    Students regress the teacher's depth under the log-likelihood loss; no
    photometric term is involved.  ``self`` trains one student, ``boot+self``
    N bootstrapped students and ``snap+self`` one student under the cyclic
    schedule.
    """
    if not isinstance(teacher_manifest, ExperimentManifest):
        teacher_manifest = ExperimentManifest.load(teacher_manifest)
    strategy = config.strategy
    if strategy.predictive != "self":
        raise ValueError("train_self_teaching needs a self, boot+self or snap+self strategy")
    teacher_paths = teacher_manifest.member_paths()
    if not teacher_paths:
        raise ValueError("teacher manifest lists no checkpoint")
    teacher = ModelCheckpoint.load(teacher_paths[0])
    student_cfg = config.depth_config(predict_uncertainty=True)
    if (teacher.config.encoder_widths != student_cfg.encoder_widths
            or teacher.config.scales != student_cfg.scales):
        raise ValueError("teacher and student architectures differ")

    out_dir = Path(out_dir)
    writer = _Writer(out_dir)
    targets = self_teaching_targets(teacher, dataset, out_dir / "proxy", config.d_min, config.d_max)
    proxy = np.stack([targets[i] for i in dataset.ids])
    epochs = config.student_epochs or config.epochs
    train_idx = dataset.train_indices
    if strategy.empirical == "boot":
        for m in range(strategy.N):
            subset = bootstrap_subset(train_idx, strategy.bootstrap_fraction, config.seed, m)
            depth, _, _, hist = _run(config, dataset, subset, _member_seed(config.seed + 1, m), epochs,
                                     True, proxy=proxy)
            writer.add(f"member_{m:02d}", "member", depth, None, hist, subset=subset)
    elif strategy.empirical == "snap":
        schedule = _resolve_schedule(config, len(train_idx), epochs)
        _, _, snaps, hist = _run(config, dataset, train_idx, config.seed + 1, epochs, True,
                                 proxy=proxy, schedule=schedule)
        _add_snapshots(writer, snaps, strategy.N, hist)
    else:
        depth, _, _, hist = _run(config, dataset, train_idx, config.seed + 1, epochs, True, proxy=proxy)
        writer.add("member_00", "member", depth, None, hist)
    teacher_path = teacher_manifest.root / "manifest.json"
    try:
        teacher_ref = teacher_path.relative_to(out_dir).as_posix()
    except ValueError:
        teacher_ref = str(teacher_path)
    proxy_dir = (out_dir / "proxy").relative_to(out_dir).as_posix()
    return writer.finish(config, dataset, teacher_manifest=teacher_ref, proxy_dir=proxy_dir)


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

class Experiment:
    """A loaded manifest ready for inference.

    ``forward_count`` sums the depth network forwards issued so far, which
    makes the per-strategy forward budget observable.
    """

    def __init__(self, manifest: Union[ExperimentManifest, str, Path], seed: Optional[int] = None):
        if not isinstance(manifest, ExperimentManifest):
            manifest = ExperimentManifest.load(manifest)
        self.manifest = manifest
        self.config = manifest.config
        self.strategy = manifest.config.strategy
        # Seeds the dropout masks drawn at inference.
        self.seed = manifest.config.seed if seed is None else seed
        try:
            self.nets = [ModelCheckpoint.load(p).build() for p in manifest.member_paths()]
        except (OSError, ValueError, KeyError) as exc:
            raise ValueError(f"cannot load experiment checkpoints: {exc}") from exc
        if not self.nets:
            raise ValueError("manifest has no member checkpoints")

    @property
    def forward_count(self) -> int:
        return sum(net.forward_calls for net in self.nets)

    def reset_counter(self):
        for net in self.nets:
            net.forward_calls = 0

    def infer(self, image: Union[ImageFrame, torch.Tensor]) -> Tuple[DepthMap, UncertaintyMap]:
        s, c = self.strategy, self.config
        kw = dict(d_min=c.d_min, d_max=c.d_max)
        if s.kind == "post":
            return post_uncertainty(self.nets[0], image, **kw)
        if s.kind == "drop":
            return dropout_uncertainty(self.nets[0], image, N=s.N, seed=self.seed, **kw)
        if s.kind in ("repr", "log", "self"):
            return predictive_uncertainty(self.nets[0], image, s.predictive, **kw)
        return ensemble_uncertainty(self.nets, image, predictive=s.predictive, **kw)


def infer(manifest: Union[ExperimentManifest, str, Path], image: Union[ImageFrame, torch.Tensor]):
    return Experiment(manifest).infer(image)
