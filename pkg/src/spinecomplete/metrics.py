"""Shape-completion and segmentation metrics.

Chamfer distances are means of *squared* nearest-neighbour distances and are
reported in the clouds' own units squared (mm^2).  EMD here is the raw mean
matched distance; scale normalisation happens in :func:`normalized_emd`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assignment import auction, hungarian
from .errors import (
    DimensionMismatchError,
    EmptyCloudError,
    InvalidInputError,
    SizeMismatchError,
    SolverCapError,
    UndefinedCorrelationError,
)
from .geometry import PointCloud
from .spatial import SpatialIndex, nearest_sq_dist, occupancy

EMD_EXACT_CAP = 1024


def _pts(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def _nonempty(*clouds):
    out = []
    for c in clouds:
        p = _pts(c)
        if len(p) == 0:
            raise EmptyCloudError("metric needs non-empty clouds")
        out.append(p)
    return out


@dataclass(frozen=True)
class ChamferResult:
    cd: float
    cd_pred_to_gt: float
    cd_gt_to_pred: float


@dataclass(frozen=True)
class SplitChamferResult:
    cd_top: float | None
    cd_bottom: float | None
    visible_fraction: float
    tau_vis: float
    top_empty: bool
    bottom_empty: bool
    # set when the prediction had no points in a partition that GT does have;
    # that term was then scored against the full prediction
    pred_top_fallback: bool = False
    pred_bottom_fallback: bool = False


@dataclass(frozen=True)
class EmdResult:
    emd: float
    assignment: np.ndarray  # pred index -> gt index


@dataclass(frozen=True)
class SnrResult:
    p_signal: float
    p_noise: float
    snr_db: float  # +inf when p_noise == 0


@dataclass(frozen=True)
class SegResult:
    accuracy: float
    class_iou: dict = field(default_factory=dict)
    mean_iou: float = float("nan")


def chamfer(pred, gt) -> ChamferResult:
    p, g = _nonempty(pred, gt)
    a = float(nearest_sq_dist(p, g)[1].mean())
    b = float(nearest_sq_dist(g, p)[1].mean())
    return ChamferResult(a + b, a, b)


def median_spacing(points) -> float:
    """Median distance from each point to its nearest other point."""
    p = _pts(points)
    if len(p) < 2:
        raise InvalidInputError("spacing needs at least two points")
    _, d2 = SpatialIndex(p).query(p, 2)
    return float(np.median(np.sqrt(d2[:, 1])))


def chamfer_split(pred, gt, input_partial, tau_vis: float | None = None) -> SplitChamferResult:
    """Chamfer distance on the visible (top) and hidden (bottom) surface.

    A GT or predicted point is "visible" when it lies within ``tau_vis`` of
    the input partial cloud.  ``tau_vis`` defaults to twice the median
    nearest-neighbour spacing of the partial.  When GT has points in a
    partition but the prediction has none, that partition's CD is measured
    against the whole prediction and flagged; when GT has none, the CD is
    undefined (None) and flagged.
    """
    part = _pts(input_partial)
    if len(part) == 0:
        raise EmptyCloudError("input partial cloud is empty")
    p, g = _nonempty(pred, gt)
    if tau_vis is None:
        tau_vis = 2.0 * median_spacing(part)
    if not tau_vis > 0:
        raise InvalidInputError("tau_vis must be positive")
    index = SpatialIndex(part)
    tau2 = tau_vis * tau_vis
    g_vis = index.query(g, 1)[1][:, 0] <= tau2
    p_vis = index.query(p, 1)[1][:, 0] <= tau2

    def part_cd(gmask, pmask):
        if not gmask.any():
            return None, False
        if not pmask.any():
            return chamfer(p, g[gmask]).cd, True
        return chamfer(p[pmask], g[gmask]).cd, False

    top, top_fb = part_cd(g_vis, p_vis)
    bottom, bottom_fb = part_cd(~g_vis, ~p_vis)
    return SplitChamferResult(
        cd_top=top,
        cd_bottom=bottom,
        visible_fraction=float(g_vis.mean()),
        tau_vis=float(tau_vis),
        top_empty=top is None,
        bottom_empty=bottom is None,
        pred_top_fallback=top_fb,
        pred_bottom_fallback=bottom_fb,
    )


def bbox_longest_side(points) -> float:
    p = _pts(points)
    return float((p.max(0) - p.min(0)).max())


def bbox_diagonal(points) -> float:
    p = _pts(points)
    return float(np.linalg.norm(p.max(0) - p.min(0)))


def fscore(pred, gt, threshold: float | None = None) -> float:
    """F1 at a distance threshold; defaults to 1% of the GT bounding box's longest side."""
    p, g = _nonempty(pred, gt)
    if threshold is None:
        threshold = 0.01 * bbox_longest_side(g)
    if not threshold > 0:
        raise InvalidInputError("threshold must be positive")
    t2 = threshold * threshold
    precision = float((nearest_sq_dist(p, g)[1] <= t2).mean())
    recall = float((nearest_sq_dist(g, p)[1] <= t2).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _cost_matrix(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    d = p[:, None, :] - g[None, :, :]
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def _check_emd_inputs(pred, gt, cap):
    p, g = _nonempty(pred, gt)
    if len(p) != len(g):
        raise SizeMismatchError(
            f"EMD needs equal cardinalities ({len(p)} vs {len(g)}); resample one cloud first"
        )
    if cap is not None and len(p) > cap:
        raise SolverCapError(f"{len(p)} points exceed the exact solver cap of {cap}; use emd_approx")
    return p, g


def emd_exact(pred, gt, cap: int = EMD_EXACT_CAP) -> EmdResult:
    """Mean matched distance under the optimal bijection (Hungarian)."""
    p, g = _check_emd_inputs(pred, gt, cap)
    cost = _cost_matrix(p, g)
    phi = hungarian(cost)
    return EmdResult(float(cost[np.arange(len(p)), phi].mean()), phi)


def emd_approx(pred, gt, epsilon: float = 1e-3) -> EmdResult:
    """Auction approximation: ``optimal <= emd <= optimal + epsilon``."""
    p, g = _check_emd_inputs(pred, gt, None)
    cost = _cost_matrix(p, g)
    phi = auction(cost, epsilon)
    return EmdResult(float(cost[np.arange(len(p)), phi].mean()), phi)


def normalized_emd(pred, gt, method: str = "exact", epsilon: float = 1e-3, cap: int = EMD_EXACT_CAP) -> EmdResult:
    """EMD after scaling both clouds by 1 / (GT bounding-box diagonal)."""
    p, g = _nonempty(pred, gt)
    diag = bbox_diagonal(g)
    if not diag > 0:
        raise InvalidInputError("GT bounding box is degenerate; cannot normalise")
    p, g = p / diag, g / diag
    if method == "exact":
        return emd_exact(p, g, cap)
    if method == "approx":
        return emd_approx(p, g, epsilon)
    if method == "auto":
        return emd_exact(p, g, cap) if len(p) <= cap else emd_approx(p, g, epsilon)
    raise InvalidInputError(f"unknown EMD method {method!r}")


def snr(pred, gt, pairing: str = "nn") -> SnrResult:
    """Signal power of GT about its centroid over the GT-to-prediction error power.

    ``pairing="nn"`` pairs each GT point with its nearest predicted point;
    ``"index"`` pairs points by position (equal cardinalities required).
    """
    p, g = _nonempty(pred, gt)
    mu = g.mean(axis=0)
    dg = g - mu
    p_signal = float((dg * dg).sum(1).mean())
    if pairing == "nn":
        p_noise = float(nearest_sq_dist(g, p)[1].mean())
    elif pairing == "index":
        if len(p) != len(g):
            raise SizeMismatchError("index-matched SNR needs equal cardinalities")
        e = g - p
        p_noise = float((e * e).sum(1).mean())
    else:
        raise InvalidInputError(f"unknown SNR pairing {pairing!r}")
    if p_noise == 0:
        return SnrResult(p_signal, 0.0, math.inf)
    if p_signal == 0:
        return SnrResult(0.0, p_noise, -math.inf)
    return SnrResult(p_signal, p_noise, 10.0 * math.log10(p_signal / p_noise))


def voxel_iou(a, b, voxel_size: float) -> float:
    """Occupancy IoU on a shared grid anchored at the joint bounding-box min corner."""
    pa, pb = _pts(a), _pts(b)
    if len(pa) == 0 and len(pb) == 0:
        raise EmptyCloudError("IoU of two empty clouds is undefined")
    if not voxel_size > 0:
        raise InvalidInputError("voxel_size must be positive")
    origin = np.concatenate([pa, pb]).min(axis=0)
    ca = occupancy(pa, origin, voxel_size).occupied
    cb = occupancy(pb, origin, voxel_size).occupied
    return len(ca & cb) / len(ca | cb)


def _labels(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        if x.labels is None:
            raise InvalidInputError("cloud carries no labels")
        return x.labels
    return np.asarray(x, dtype=np.int64).reshape(-1)


def seg_metrics(pred_labels, gt_labels) -> SegResult:
    """Point accuracy and per-class IoU; ``mean_iou`` averages classes present in GT."""
    pl, gl = _labels(pred_labels), _labels(gt_labels)
    if len(pl) != len(gl):
        raise DimensionMismatchError(f"{len(pl)} predicted vs {len(gl)} GT labels")
    if len(gl) == 0:
        raise EmptyCloudError("no labelled points")
    accuracy = float((pl == gl).mean())
    ious = {}
    for c in np.union1d(pl, gl):
        tp = int(np.sum((pl == c) & (gl == c)))
        fp = int(np.sum((pl == c) & (gl != c)))
        fn = int(np.sum((pl != c) & (gl == c)))
        ious[int(c)] = tp / (tp + fp + fn)
    present = [ious[int(c)] for c in np.unique(gl)]
    return SegResult(accuracy, ious, float(np.mean(present)))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) != len(y):
        raise DimensionMismatchError("pearson needs equal-length vectors")
    if len(x) < 2:
        raise InvalidInputError("pearson needs at least two observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if np.all(x == x[0]) or np.all(y == y[0]) or sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("undefined correlation: zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))
