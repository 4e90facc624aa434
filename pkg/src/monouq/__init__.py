"""Self-supervised monocular depth with per-pixel uncertainty.

Modules: ``geometry`` (cameras, warping), ``photometric`` (SSIM, reprojection
losses), ``models`` (networks, checkpoints), ``uncertainty`` (strategies and
their losses), ``trainer``, ``evaluation`` (metrics, sparsification),
``datagen`` (synthetic stereo/video scenes), ``fileio`` and ``cli``.
"""

from .evaluation import DepthMetrics, SparsificationResult, depth_metrics, median_scale, sparsification
from .geometry import DepthMap, ImageFrame, Intrinsics, Pose, backproject, disparity_to_depth, project, warp
from .photometric import LossConfig, min_reprojection, photometric_error, smoothness, ssim
from .trainer import Experiment, ExperimentManifest, TrainConfig, infer, train, train_self_teaching
from .uncertainty import (KINDS, PredictionSet, SnapshotSchedule, StrategyConfig, UncertaintyMap,
                          bayesian_aggregate, empirical_moments, log_likelihood_loss, repr_loss, snapshot_lr)

__version__ = "0.1.0"
