"""Depth accuracy metrics and sparsification-based uncertainty scores."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

MAX_DEPTH = 80.0
MIN_DEPTH = 1e-3
SPARSIFICATION_STEP = 0.02
SPARSIFICATION_METRICS = ("abs_rel", "rmse", "a1")
# Number of removal fractions: 0, 0.02, ..., 0.98.
N_FRACTIONS = 50


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def mean(cls, items: Sequence["DepthMetrics"]) -> "DepthMetrics":
        if not items:
            raise ValueError("cannot average an empty list of metrics")
        return cls(**{k: float(np.mean([getattr(m, k) for m in items])) for k in cls.__dataclass_fields__})


def _valid_pixels(pred, gt, valid, cap: float, floor: float):
    p, g = _values(pred), _values(gt)
    if p.shape != g.shape:
        raise ValueError("prediction and ground truth shapes differ")
    mask = (g > floor) & (g <= cap) & np.isfinite(g)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if not mask.any():
        raise ValueError("no valid pixels to evaluate")
    return np.clip(p[mask], floor, cap), g[mask], mask


def depth_metrics(pred, gt, valid=None, cap: float = MAX_DEPTH, floor: float = MIN_DEPTH) -> DepthMetrics:
    """Standard error and inlier metrics over ``valid`` pixels with ``0 < gt <= cap``."""
    p, g, _ = _valid_pixels(pred, gt, valid, cap, floor)
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


def median_scale(pred, gt, valid=None) -> np.ndarray:
    """Rescale ``pred`` so its median over ``valid`` matches the ground truth's."""
    p, g = _values(pred), _values(gt)
    mask = np.ones(p.shape, bool) if valid is None else np.asarray(valid, dtype=bool)
    if not mask.any():
        raise ValueError("median scaling needs at least one valid pixel")
    med_p, med_g = np.median(p[mask]), np.median(g[mask])
    if med_p <= 0 or med_g <= 0:
        raise ValueError("median scaling needs positive medians")
    return p * (med_g / med_p)


# --------------------------------------------------------------------------
# sparsification
# --------------------------------------------------------------------------

def per_pixel_errors(pred, gt, metric: str) -> np.ndarray:
    """Per-pixel contribution whose (root) mean gives ``metric`` on any subset.

    ``abs_rel`` -> ``|p - g| / g``; ``rmse`` -> ``(p - g)^2``;
    ``a1`` -> ``1`` where ``max(p/g, g/p) >= 1.25`` else ``0``.
    """
    p, g = _values(pred), _values(gt)
    if metric == "abs_rel":
        return np.abs(p - g) / g
    if metric == "rmse":
        return (p - g) ** 2
    if metric == "a1":
        return (np.maximum(p / g, g / p) >= 1.25).astype(np.float64)
    raise ValueError(f"unknown sparsification metric {metric!r}")


def subset_metric(errors: np.ndarray, metric: str) -> float:
    m = float(np.mean(errors))
    return float(np.sqrt(max(m, 0.0))) if metric == "rmse" else m


@dataclass
class SparsificationResult:
    metric: str
    fractions: np.ndarray
    estimated_curve: np.ndarray
    oracle_curve: np.ndarray
    random_curve: np.ndarray
    ause: float
    aurg: float

    def rows(self) -> List[List[float]]:
        return [[float(f), float(e), float(o), float(r)] for f, e, o, r in
                zip(self.fractions, self.estimated_curve, self.oracle_curve, self.random_curve)]


def fractions_grid() -> np.ndarray:
    return np.arange(N_FRACTIONS) * SPARSIFICATION_STEP


def removal_counts(n: int) -> np.ndarray:
    """Pixels removed at each fraction; integer arithmetic avoids rounding drift."""
    return (np.arange(N_FRACTIONS) * n) // N_FRACTIONS


def _curve(errors: np.ndarray, key: np.ndarray, metric: str) -> np.ndarray:
    """Metric on the pixels left after removing the highest-``key`` ones.

    Pixels sharing a key are interchangeable: when a removal count cuts a
    tie group, the survivors of that group contribute its mean error.  This
    is the expectation over random tie-breaking and keeps the result
    deterministic.
    """
    n = errors.size
    order = np.argsort(-key, kind="stable")
    e = errors[order]
    k_sorted = key[order]
    # suffix[i] = sum of e[i:], accumulated from the kept end to avoid cancellation
    suffix = np.concatenate([np.cumsum(e[::-1])[::-1], [0.0]])

    starts = np.flatnonzero(np.concatenate([[True], k_sorted[1:] != k_sorted[:-1]]))
    ends = np.concatenate([starts[1:], [n]])
    group_mean = (suffix[starts] - suffix[ends]) / (ends - starts)

    ks = removal_counts(n)
    g = np.searchsorted(starts, ks, side="right") - 1
    kept = suffix[ends[g]] + (ends[g] - ks) * group_mean[g]
    remaining = np.maximum(kept, 0.0) / (n - ks)
    return np.sqrt(remaining) if metric == "rmse" else remaining


def sparsification(errors, uncertainty, valid=None, metric: str = "abs_rel") -> SparsificationResult:
    """Sparsification curves and their AUSE / AURG areas for one image.

    ``errors`` are per-pixel contributions from :func:`per_pixel_errors`.
    Pixels are removed in order of decreasing uncertainty (estimated) or
    decreasing error (oracle) in steps of 2%; areas use the trapezoid rule.
    """
    if metric not in SPARSIFICATION_METRICS:
        raise ValueError(f"unknown sparsification metric {metric!r}")
    err, unc = _values(errors), _values(uncertainty)
    if err.shape != unc.shape:
        raise ValueError("errors and uncertainty shapes differ")
    mask = np.isfinite(err) & np.isfinite(unc)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    err, unc = err[mask], unc[mask]
    if err.size == 0:
        raise ValueError("no valid pixels for sparsification")

    fractions = fractions_grid()
    estimated = _curve(err, unc, metric)
    oracle = _curve(err, err, metric)
    random = np.full(N_FRACTIONS, subset_metric(err, metric))
    return SparsificationResult(
        metric=metric,
        fractions=fractions,
        estimated_curve=estimated,
        oracle_curve=oracle,
        random_curve=random,
        ause=float(np.trapezoid(estimated - oracle, fractions)),
        aurg=float(np.trapezoid(random - estimated, fractions)),
    )


def aggregate_over_test_set(results: Iterable[SparsificationResult]) -> SparsificationResult:
    """Unweighted mean of per-image curves and areas."""
    results = list(results)
    if not results:
        raise ValueError("nothing to aggregate")
    metrics = {r.metric for r in results}
    if len(metrics) != 1:
        raise ValueError("cannot mix sparsification metrics")

    def avg(attr):
        return np.mean([getattr(r, attr) for r in results], axis=0)

    return SparsificationResult(
        metric=results[0].metric,
        fractions=results[0].fractions.copy(),
        estimated_curve=avg("estimated_curve"),
        oracle_curve=avg("oracle_curve"),
        random_curve=avg("random_curve"),
        ause=float(np.mean([r.ause for r in results])),
        aurg=float(np.mean([r.aurg for r in results])),
    )


def evaluate_image(pred, gt, uncertainty=None, valid=None, use_median_scaling: bool = False,
                   cap: float = MAX_DEPTH, floor: float = MIN_DEPTH):
    """Depth metrics and (if ``uncertainty`` is given) per-metric sparsification.

    Median scaling, when requested, is applied before both.
    """
    p, g = _values(pred), _values(gt)
    mask = (g > floor) & (g <= cap) & np.isfinite(g)
    if valid is not None:
        mask &= np.asarray(valid, dtype=bool)
    if use_median_scaling:
        p = median_scale(p, g, mask)
    p = np.clip(p, floor, cap)
    metrics = depth_metrics(p, g, mask, cap, floor)
    sparse: Dict[str, SparsificationResult] = {}
    if uncertainty is not None:
        for name in SPARSIFICATION_METRICS:
            sparse[name] = sparsification(per_pixel_errors(np.where(mask, p, 1.0), np.where(mask, g, 1.0), name),
                                          uncertainty, mask, name)
    return metrics, sparse
