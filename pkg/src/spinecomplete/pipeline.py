"""End-to-end orchestration: labelling, sample extraction, folds, reports.

Data flow for one frame::

    depth + spine mask --unproject--> spine cloud --downsample--> labelled cloud
        --extract per level--> partial clouds  (+ GT_Complete sampled from the posed mesh)

Completion is evaluated per held-out specimen (leave-one-specimen-out) and
every sample becomes one report row.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .config import Config
from .errors import DimensionMismatchError, EmptyCloudError, InvalidInputError, SpineCompleteError
from .geometry import (
    BinaryMask,
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    TriangleMesh,
    project,
    sample_mesh_surface,
    transform_mesh,
    unproject,
)
from .metrics import (
    bbox_diagonal,
    bbox_longest_side,
    chamfer,
    chamfer_split,
    fscore,
    normalized_emd,
    pearson,
    seg_metrics,
    snr,
    voxel_iou,
)
from .errors import UndefinedCorrelationError
from .raster import render_mask
from .spatial import downsample_to, fps_indices, random_downsample

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12


# -- point-to-mesh labelling --------------------------------------------------------


@_accel.njit
def _mesh_sqdist_kernel(points, tri, tri_mesh, boxes, n_mesh, cutoff2, out):
    n = points.shape[0]
    for i in range(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        for m in range(n_mesh):
            out[i, m] = np.inf
        for m in range(n_mesh):
            dx = max(boxes[m, 0] - px, 0.0, px - boxes[m, 3])
            dy = max(boxes[m, 1] - py, 0.0, py - boxes[m, 4])
            dz = max(boxes[m, 2] - pz, 0.0, pz - boxes[m, 5])
            if dx * dx + dy * dy + dz * dz > cutoff2:
                out[i, m] = -1.0  # marker: mesh pruned, beyond cutoff
        for t in range(tri.shape[0]):
            m = tri_mesh[t]
            if out[i, m] == -1.0:
                continue
            d = _point_triangle_sqdist(px, py, pz, tri[t])
            if d < out[i, m]:
                out[i, m] = d
        for m in range(n_mesh):
            if out[i, m] == -1.0:
                out[i, m] = np.inf


@_accel.njit
def _point_triangle_sqdist(px, py, pz, t):
    ax, ay, az = t[0, 0], t[0, 1], t[0, 2]
    e0x, e0y, e0z = t[1, 0] - ax, t[1, 1] - ay, t[1, 2] - az
    e1x, e1y, e1z = t[2, 0] - ax, t[2, 1] - ay, t[2, 2] - az
    wx, wy, wz = px - ax, py - ay, pz - az
    d00 = e0x * e0x + e0y * e0y + e0z * e0z
    d01 = e0x * e1x + e0y * e1y + e0z * e1z
    d11 = e1x * e1x + e1y * e1y + e1z * e1z
    d20 = wx * e0x + wy * e0y + wz * e0z
    d21 = wx * e1x + wy * e1y + wz * e1z
    den = d00 * d11 - d01 * d01
    if den > 0.0:
        v = (d11 * d20 - d01 * d21) / den
        w = (d00 * d21 - d01 * d20) / den
        if v >= 0.0 and w >= 0.0 and v + w <= 1.0:
            qx = wx - v * e0x - w * e1x
            qy = wy - v * e0y - w * e1y
            qz = wz - v * e0z - w * e1z
            return qx * qx + qy * qy + qz * qz
    best = np.inf
    for k in range(3):
        sx, sy, sz = t[k, 0], t[k, 1], t[k, 2]
        ex, ey, ez = t[(k + 1) % 3, 0] - sx, t[(k + 1) % 3, 1] - sy, t[(k + 1) % 3, 2] - sz
        rx, ry, rz = px - sx, py - sy, pz - sz
        ee = ex * ex + ey * ey + ez * ez
        s = 0.0
        if ee > 0.0:
            s = (rx * ex + ry * ey + rz * ez) / ee
            s = min(max(s, 0.0), 1.0)
        qx, qy, qz = rx - s * ex, ry - s * ey, rz - s * ez
        d = qx * qx + qy * qy + qz * qz
        if d < best:
            best = d
    return best


def _point_triangle_sqdist_numpy(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """(P, T) squared distances, same formulas as the compiled kernel."""
    a = tri[:, 0][None]
    e0 = (tri[:, 1] - tri[:, 0])[None]
    e1 = (tri[:, 2] - tri[:, 0])[None]
    w = p[:, None, :] - a

    def dot(x, y):
        return x[..., 0] * y[..., 0] + x[..., 1] * y[..., 1] + x[..., 2] * y[..., 2]

    d00, d01, d11 = dot(e0, e0), dot(e0, e1), dot(e1, e1)
    d20, d21 = dot(w, e0), dot(w, e1)
    den = d00 * d11 - d01 * d01
    with np.errstate(divide="ignore", invalid="ignore"):
        v = (d11 * d20 - d01 * d21) / den
        ww = (d00 * d21 - d01 * d20) / den
    inside = (den > 0) & (v >= 0) & (ww >= 0) & (v + ww <= 1)
    q = w - np.where(inside, v, 0)[..., None] * e0 - np.where(inside, ww, 0)[..., None] * e1
    plane = dot(q, q)
    best = np.full(plane.shape, np.inf)
    for k in range(3):
        s0 = tri[:, k][None]
        e = (tri[:, (k + 1) % 3] - tri[:, k])[None]
        r = p[:, None, :] - s0
        ee = dot(e, e)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(ee > 0, dot(r, e) / ee, 0.0)
        s = np.clip(s, 0.0, 1.0)
        qq = r - s[..., None] * e
        best = np.minimum(best, dot(qq, qq))
    return np.where(inside, plane, best)


def mesh_distances(points, meshes: list[TriangleMesh], cutoff: float = np.inf) -> np.ndarray:
    """(N, M) Euclidean distance from each point to each mesh surface.

    Meshes whose bounding box is farther than ``cutoff`` from a point report
    ``inf`` for that point.
    """
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    tri = np.ascontiguousarray(np.concatenate([m.corners() for m in meshes]))
    tri_mesh = np.concatenate([np.full(len(m.triangles), i, dtype=np.int64) for i, m in enumerate(meshes)])
    boxes = np.array([np.concatenate([m.vertices.min(0), m.vertices.max(0)]) for m in meshes])
    cutoff2 = cutoff * cutoff if np.isfinite(cutoff) else np.inf
    if _accel.numba_enabled():
        out = np.empty((len(pts), len(meshes)))
        _mesh_sqdist_kernel(pts, tri, tri_mesh, boxes, len(meshes), cutoff2, out)
        return np.sqrt(out)
    out = np.full((len(pts), len(meshes)), np.inf)
    for m in range(len(meshes)):
        lo, hi = boxes[m, :3], boxes[m, 3:]
        gap = np.maximum(np.maximum(lo - pts, 0.0), pts - hi)
        near = np.nonzero((gap * gap).sum(1) <= cutoff2)[0]
        mt = tri[tri_mesh == m]
        for s in range(0, len(near), 256):
            sel = near[s:s + 256]
            out[sel, m] = _point_triangle_sqdist_numpy(pts[sel], mt).min(axis=1)
    return np.sqrt(out)


def generate_gt_labels(
    spine_cloud: PointCloud, meshes: list[TriangleMesh], t: RigidTransform | None, tau_bg: float = 3.0
) -> PointCloud:
    """Label each point with the level of the nearest mesh surface within ``tau_bg``.

    ``meshes`` are in CT space and moved to the camera by ``t`` (pass None if
    they are already in camera space).  Distances equal within 1e-12 go to
    the lower level; points farther than ``tau_bg`` from every mesh get 0.
    """
    if not meshes:
        raise InvalidInputError("generate_gt_labels needs at least one mesh")
    if not tau_bg > 0:
        raise InvalidInputError("tau_bg must be positive")
    cam = [transform_mesh(t, m) if t is not None else m for m in meshes]
    order = np.argsort([m.level for m in cam], kind="stable")
    cam = [cam[i] for i in order]
    levels = np.array([m.level for m in cam], dtype=np.int64)
    if len(spine_cloud) == 0:
        return spine_cloud.with_labels(np.zeros(0, dtype=np.int64))
    d = mesh_distances(spine_cloud.points, cam, cutoff=tau_bg)
    dmin = d.min(axis=1)
    # first (lowest-level) mesh within the tie tolerance of the minimum
    first = np.argmax(d <= (dmin + TIE_TOL)[:, None], axis=1)
    labels = np.where(dmin <= tau_bg, levels[first], 0)
    return spine_cloud.with_labels(labels)


def lookup_mask_labels(cloud: PointCloud, label_image: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Label each point by the mask pixel it projects to (0 outside the image)."""
    uvd, valid = project(cloud, intr)
    labels = np.zeros(len(cloud), dtype=np.int64)
    u = np.round(np.where(valid, uvd[:, 0], -1)).astype(np.int64)
    v = np.round(np.where(valid, uvd[:, 1], -1)).astype(np.int64)
    inside = valid & (u >= 0) & (u < intr.width) & (v >= 0) & (v < intr.height)
    labels[inside] = np.asarray(label_image)[v[inside], u[inside]]
    return labels


def generate_mask_labels(
    spine_cloud: PointCloud, meshes: list[TriangleMesh], t: RigidTransform, intr: CameraIntrinsics
) -> PointCloud:
    """Labels from the rendered level mask (parity path for :func:`generate_gt_labels`)."""
    mask = render_mask(meshes, t, intr)
    return spine_cloud.with_labels(lookup_mask_labels(spine_cloud, mask.values, intr))


@dataclass(frozen=True)
class Extraction:
    cloud: PointCloud
    empty: bool


def extract_vertebra(labeled: PointCloud, level: int) -> Extraction:
    if labeled.labels is None:
        raise InvalidInputError("cloud carries no labels")
    idx = np.nonzero(labeled.labels == level)[0]
    return Extraction(labeled.subset(idx), len(idx) == 0)


# -- label files ------------------------------------------------------------------


def write_label_file(path, labels) -> None:
    """External label file: header line ``label`` then one integer per line."""
    from .io.atomic import atomic_write_text

    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    atomic_write_text(path, "label\n" + "".join(f"{int(x)}\n" for x in lab))


def read_label_file(path) -> np.ndarray:
    from .errors import CodecError

    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split()
    if not lines or lines[0] != "label":
        raise CodecError(f"{os.fspath(path)}: label file must start with a 'label' header line")
    try:
        return np.array([int(x) for x in lines[1:]], dtype=np.int64)
    except ValueError as exc:
        raise CodecError(f"{os.fspath(path)}: {exc}") from None


# -- dataset ----------------------------------------------------------------------


@dataclass
class FrameRecord:
    specimen: str
    view: str
    depth: str
    intrinsics: CameraIntrinsics
    pose: RigidTransform
    color: str | None = None
    spine_mask: str | None = None
    level_mask: str | None = None
    labels: str | None = None


@dataclass
class Manifest:
    root: str
    frames: list
    meshes: dict  # specimen -> {level: TriangleMesh}

    @property
    def specimens(self) -> list[str]:
        return sorted(self.meshes)


def load_manifest(path) -> Manifest:
    from .errors import JsonFormatError
    from .io import load_json, read_mesh
    from .io.jsonio import intrinsics_from_dict, pose_from_dict

    doc = load_json(path)
    root = os.path.dirname(os.path.abspath(path))
    if not isinstance(doc, dict) or doc.get("version") != 1:
        raise JsonFormatError("manifest must be an object with version 1")
    unknown = sorted(set(doc) - {"version", "units", "specimens", "frames"})
    if unknown:
        raise JsonFormatError(f"unknown manifest keys {unknown}")

    def resolve(rel):
        return os.path.join(root, rel)

    def intrinsics(v):
        return intrinsics_from_dict(v if isinstance(v, dict) else load_json(resolve(v)))

    def pose(v):
        return pose_from_dict(v if isinstance(v, dict) else load_json(resolve(v)))

    meshes = {}
    for sid, spec in sorted(doc.get("specimens", {}).items()):
        meshes[sid] = {int(lv): read_mesh(resolve(p), int(lv)) for lv, p in sorted(spec["meshes"].items())}
    frame_keys = {"specimen", "view", "depth", "color", "intrinsics", "pose", "spine_mask", "level_mask", "labels"}
    frames = []
    for f in doc.get("frames", []):
        bad = sorted(set(f) - frame_keys)
        if bad:
            raise JsonFormatError(f"unknown frame keys {bad}")
        if f["specimen"] not in meshes:
            raise JsonFormatError(f"frame {f.get('view')} references unknown specimen {f['specimen']!r}")
        frames.append(FrameRecord(
            specimen=f["specimen"],
            view=f["view"],
            depth=resolve(f["depth"]),
            intrinsics=intrinsics(f["intrinsics"]),
            pose=pose(f["pose"]),
            color=resolve(f["color"]) if f.get("color") else None,
            spine_mask=resolve(f["spine_mask"]) if f.get("spine_mask") else None,
            level_mask=resolve(f["level_mask"]) if f.get("level_mask") else None,
            labels=resolve(f["labels"]) if f.get("labels") else None,
        ))
    return Manifest(root, frames, meshes)


@dataclass
class SampleRecord:
    specimen: str
    view: str
    level: int
    partial: PointCloud  # input to completion (Pred_Partial if predicted labels exist, else GT_Partial)
    gt_partial: PointCloud
    complete: PointCloud
    seg: tuple | None = None  # (predicted labels, GT labels) over the frame's labelled cloud


def stable_seed(*parts) -> int:
    """Seed derived from identifiers, identical across runs and platforms."""
    return zlib.crc32("/".join(str(p) for p in parts).encode("utf-8"))


def project_frame(frame: FrameRecord, cfg: Config) -> PointCloud:
    """Masked unprojection of one RGB-D frame (carrying external labels if present)."""
    from .io import read_color_png, read_depth_png, read_label_png

    depth = read_depth_png(frame.depth)
    color = read_color_png(frame.color) if frame.color else None
    mask = BinaryMask(read_label_png(frame.spine_mask)) if frame.spine_mask else None
    cloud = unproject(depth, frame.intrinsics, mask, color, cfg.geometry.depth_scale)
    if frame.labels:
        labels = read_label_file(frame.labels)
        if len(labels) != len(cloud):
            raise DimensionMismatchError(
                f"{frame.view}: label file has {len(labels)} entries for {len(cloud)} points"
            )
        cloud = cloud.with_labels(labels)
    elif frame.level_mask:
        cloud = cloud.with_labels(lookup_mask_labels(cloud, read_label_png(frame.level_mask), frame.intrinsics))
    return cloud


@dataclass
class BuildStats:
    frames: int = 0
    samples: int = 0
    skipped: list = field(default_factory=list)  # (specimen, view, level, reason)


def build_samples(manifest: Manifest, cfg: Config) -> tuple[list[SampleRecord], BuildStats]:
    """Turn every frame into per-level samples; levels with too few points are skipped and logged."""
    stats = BuildStats()
    samples = []
    s = cfg.sampling
    for frame in manifest.frames:
        stats.frames += 1
        cloud = project_frame(frame, cfg)
        if len(cloud) == 0:
            stats.skipped.append((frame.specimen, frame.view, 0, "empty frame"))
            continue
        seed = stable_seed(s.seed, frame.specimen, frame.view)
        n = min(s.n_spine, len(cloud))
        cloud = downsample_to(cloud, n, s.voxel_size, s.method, seed)
        meshes = [manifest.meshes[frame.specimen][lv] for lv in sorted(manifest.meshes[frame.specimen])]
        predicted = cloud.labels
        if cfg.labeling.method == "mesh":
            gt = generate_gt_labels(cloud, meshes, frame.pose, cfg.labeling.tau_bg)
        else:
            gt = generate_mask_labels(cloud, meshes, frame.pose, frame.intrinsics)
        seg = (predicted, gt.labels) if predicted is not None else None
        source = cloud if predicted is not None else gt
        for level in cfg.pipeline.levels:
            if level not in manifest.meshes[frame.specimen]:
                continue
            part = extract_vertebra(source, level)
            gt_part = extract_vertebra(gt, level)
            if part.empty or len(part.cloud) < cfg.pipeline.min_points:
                reason = "level absent" if part.empty else f"only {len(part.cloud)} points"
                stats.skipped.append((frame.specimen, frame.view, level, reason))
                logger.info("skip %s %s L%d: %s", frame.specimen, frame.view, level, reason)
                continue
            mesh = transform_mesh(frame.pose, manifest.meshes[frame.specimen][level])
            complete = sample_mesh_surface(mesh, s.n_gt, stable_seed(s.seed, frame.specimen, frame.view, level))
            samples.append(SampleRecord(frame.specimen, frame.view, level, part.cloud, gt_part.cloud, complete, seg))
            stats.samples += 1
    return samples, stats


# -- folds and evaluation -----------------------------------------------------------


@dataclass(frozen=True)
class FoldSpec:
    held_out: str
    train: tuple
    seed: int


def make_folds(specimens, seed: int = 0) -> list[FoldSpec]:
    ids = sorted(set(specimens))
    if len(ids) < 2:
        raise InvalidInputError("leave-one-specimen-out needs at least two specimens")
    return [FoldSpec(h, tuple(s for s in ids if s != h), stable_seed(seed, "fold", h)) for h in ids]


REPORT_COLUMNS = [
    "fold", "specimen", "view", "level", "n_partial",
    "iou_input", "seg_iou", "seg_accuracy",
    "cd", "cd_top", "cd_bottom", "f1", "emd", "snr_db",
    "visible_fraction", "top_empty", "bottom_empty",
]
METRIC_COLUMNS = ["iou_input", "seg_iou", "seg_accuracy", "cd", "cd_top", "cd_bottom", "f1", "emd", "snr_db"]


def evaluate_sample(pred: PointCloud, sample: SampleRecord, cfg: Config, seed: int) -> dict:
    """Full metric suite for one completed sample."""
    mc = cfg.metrics
    gt = sample.complete
    cd = chamfer(pred, gt)
    split = chamfer_split(pred, gt, sample.partial, mc.tau_vis)
    f1 = fscore(pred, gt, mc.fscore_fraction * bbox_longest_side(gt))
    m = min(mc.emd_points, len(pred), len(gt))
    pe, ge = emd_subsample(pred, m), emd_subsample(gt, m)
    emd = normalized_emd(pe, ge, mc.emd_method, mc.emd_epsilon).emd
    if mc.snr_pairing == "index" and len(pred) != len(gt):
        s = snr(pe, ge, "index")
    else:
        s = snr(pred, gt, mc.snr_pairing)
    iou = voxel_iou(sample.partial, gt, mc.iou_voxel_fraction * bbox_diagonal(gt))
    row = {
        "level": sample.level,
        "n_partial": len(sample.partial),
        "iou_input": iou,
        "seg_iou": None,
        "seg_accuracy": None,
        "cd": cd.cd,
        "cd_top": split.cd_top,
        "cd_bottom": split.cd_bottom,
        "f1": f1,
        "emd": emd,
        "snr_db": s.snr_db,
        "visible_fraction": split.visible_fraction,
        "top_empty": split.top_empty,
        "bottom_empty": split.bottom_empty,
    }
    if sample.seg is not None:
        seg = seg_metrics(sample.seg[0], sample.seg[1])
        row["seg_iou"] = seg.mean_iou
        row["seg_accuracy"] = seg.accuracy
    return row


def emd_subsample(pc: PointCloud, m: int) -> PointCloud:
    """FPS from the point farthest from the centroid.

    The start point does not depend on point order, so two permutations of
    one cloud yield the same subset (EMD of the identity completer stays 0).
    """
    if len(pc) == m:
        return pc
    c = pc.points - pc.points.mean(0)
    start = int(np.argmax(c[:, 0] * c[:, 0] + c[:, 1] * c[:, 1] + c[:, 2] * c[:, 2]))
    return pc.subset(fps_indices(pc.points, m, start))


def identity_completer(sample: SampleRecord, seed: int) -> PointCloud:
    """Oracle: the GT surface itself (as a seeded permutation)."""
    return random_downsample(sample.complete, len(sample.complete), seed)


def copy_completer(sample: SampleRecord, seed: int, n: int | None = None) -> PointCloud:
    """Baseline: the partial input resampled, i.e. no completion at all."""
    return random_downsample(sample.partial, n or len(sample.partial), seed)


def run_fold(fold: FoldSpec, samples: list[SampleRecord], cfg: Config, completer=None) -> tuple[list[dict], dict]:
    """Train on ``fold.train`` specimens (model completer) and evaluate the held-out one.

    ``completer`` overrides ``cfg.pipeline.completer`` with a callable
    ``(sample, seed) -> PointCloud``.  Returns report rows (sorted) and a
    dict with the training history (empty for stub completers).
    """
    held = [s for s in samples if s.specimen == fold.held_out]
    extra = {"history": []}
    if completer is None:
        kind = cfg.pipeline.completer
        if kind == "identity":
            completer = identity_completer
        elif kind == "copy":
            completer = copy_completer
        else:
            completer, extra = _train_model_completer(fold, samples, cfg)
    rows = []
    for s in held:
        seed = stable_seed(fold.seed, s.specimen, s.view, s.level)
        try:
            pred = completer(s, seed)
            row = evaluate_sample(pred, s, cfg, seed)
        except SpineCompleteError as exc:
            exc.args = (f"fold {fold.held_out}, sample {s.view} L{s.level}: {exc}",)
            raise
        row.update(fold=fold.held_out, specimen=s.specimen, view=s.view)
        rows.append(row)
    rows.sort(key=lambda r: (r["specimen"], r["view"], r["level"]))
    return rows, extra


def _train_model_completer(fold, samples, cfg):
    from .model import CompletionModel, complete
    from .train import train

    mcfg = cfg.model.build()
    train_set = []
    for s in samples:
        if s.specimen in fold.train:
            seed = stable_seed(fold.seed, "train", s.specimen, s.view, s.level)
            train_set.append((random_downsample(s.gt_partial, mcfg.n_input, seed), s.complete))
    if not train_set:
        raise EmptyCloudError(f"fold {fold.held_out}: no training samples")
    model = CompletionModel(mcfg, cfg.model.seed)
    result = train(model, train_set, cfg.train.build())

    def completer(sample, seed):
        return complete(model, random_downsample(sample.partial, mcfg.n_input, seed))

    return completer, {"history": result.history, "model": model}


# -- reports ------------------------------------------------------------------------


def format_value(v) -> str:
    """CSV cell: 17 significant digits, 'inf'/'-inf'/'nan', empty for undefined."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return format(f, ".17g")
    return str(v)


def rows_to_csv(rows: list[dict], columns=REPORT_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r.get(c)) for c in columns])
    return buf.getvalue()


def _parse_cell(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_report_csv(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _mean(values):
    """Mean over finite values; counts of excluded infinities and missing values."""
    finite = [float(v) for v in values if v is not None and isinstance(v, (int, float)) and math.isfinite(v)]
    n_inf = sum(1 for v in values if isinstance(v, (int, float)) and math.isinf(v))
    n_missing = sum(1 for v in values if v is None or (isinstance(v, float) and math.isnan(v)))
    mean = math.fsum(finite) / len(finite) if finite else None
    return mean, len(finite), n_inf, n_missing


def aggregate(rows: list[dict], metrics=METRIC_COLUMNS) -> dict:
    """Means per level, per specimen and overall.

    Infinite SNR values are excluded from the means and counted under
    ``excluded_inf``; undefined cells (e.g. an empty CD_top partition) are
    counted under ``missing``.
    """

    def block(group):
        out = {"n_rows": len(group), "means": {}, "counts": {}, "excluded_inf": {}, "missing": {}}
        for m in metrics:
            mean, n, n_inf, n_missing = _mean([r.get(m) for r in group])
            out["means"][m] = mean
            out["counts"][m] = n
            out["excluded_inf"][m] = n_inf
            out["missing"][m] = n_missing
        return out

    per_level = {}
    for lv in sorted({r["level"] for r in rows}):
        per_level[f"L{lv}"] = block([r for r in rows if r["level"] == lv])
    per_specimen = {}
    for sp in sorted({r["specimen"] for r in rows}):
        per_specimen[sp] = block([r for r in rows if r["specimen"] == sp])
    return {
        "overall": block(rows),
        "per_level": per_level,
        "per_specimen": per_specimen,
        "notes": {
            "cd_units": "squared model units (mm^2)",
            "emd": "mean matched distance after scaling both clouds by 1/(GT bbox diagonal)",
            "snr_inf": "rows with zero noise power report snr_db=inf and are excluded from means",
        },
    }


@dataclass
class CorrelationResult:
    variables: list
    matrix: np.ndarray  # NaN where undefined
    undefined: np.ndarray  # bool


def _column(rows, name) -> np.ndarray:
    values = [r.get(name) for r in rows]
    if name == "specimen" or any(isinstance(v, str) for v in values if v is not None):
        # categorical: ordinal code by sorted identifier
        codes = {v: i for i, v in enumerate(sorted({str(v) for v in values if v is not None}))}
        return np.array([codes[str(v)] if v is not None else np.nan for v in values], dtype=np.float64)
    return np.array([np.nan if v is None else float(v) for v in values], dtype=np.float64)


def correlation_matrix(rows: list[dict], variables: list[str]) -> CorrelationResult:
    """Pairwise Pearson coefficients over rows where both cells are finite.

    A pair with fewer than two usable rows or zero variance is undefined
    (NaN, flagged).  The diagonal is 1 for every column that is defined at all.
    """
    if len(rows) < 2:
        raise InvalidInputError("correlation needs at least two rows")
    cols = [_column(rows, v) for v in variables]
    k = len(variables)
    mat = np.full((k, k), np.nan)
    undefined = np.zeros((k, k), dtype=bool)
    for i in range(k):
        for j in range(i, k):
            ok = np.isfinite(cols[i]) & np.isfinite(cols[j])
            try:
                r = pearson(cols[i][ok], cols[j][ok])
                if i == j:
                    r = 1.0
            except (UndefinedCorrelationError, InvalidInputError):
                r = np.nan
                undefined[i, j] = undefined[j, i] = True
            mat[i, j] = mat[j, i] = r
    return CorrelationResult(list(variables), mat, undefined)


def correlation_to_csv(res: CorrelationResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variable"] + res.variables)
    for i, name in enumerate(res.variables):
        w.writerow([name] + ["undefined" if res.undefined[i, j] else format_value(res.matrix[i, j])
                             for j in range(len(res.variables))])
    return buf.getvalue()


def history_to_csv(history: list[dict]) -> str:
    return rows_to_csv(history, ["epoch", "step", "train_cd", "val_cd"])


def crossval(manifest: Manifest, cfg: Config, completer=None) -> dict:
    """All folds of the leave-one-specimen-out loop; returns rows per fold and build stats."""
    samples, stats = build_samples(manifest, cfg)
    folds = make_folds(manifest.specimens, cfg.pipeline.seed)
    results = {}
    for fold in folds:
        rows, extra = run_fold(fold, samples, cfg, completer)
        results[fold.held_out] = {"rows": rows, "history": extra.get("history", [])}
    return {"folds": results, "stats": stats}
