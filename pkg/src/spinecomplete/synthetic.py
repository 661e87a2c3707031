"""Procedural shapes and scenes for tests, benchmarks and the bundled fixture.

* :func:`superquadric_mesh` - closed triangle mesh of a superquadric
  (spheres are the special case ``e1 = e2 = 1`` with equal radii).
* :func:`occluded_pair` - a complete surface sample plus the partial view that
  survives a random half-space cut removing a chosen fraction of the points.
* :func:`completion_dataset` - many such pairs for the completion benchmark.
* :func:`make_fixture` - a small multi-specimen RGB-D dataset on disk (meshes,
  depth/colour PNGs, intrinsics, poses, external label files and a manifest).
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraIntrinsics,
    DepthImage,
    PointCloud,
    RigidTransform,
    TriangleMesh,
    sample_mesh_surface,
    transform_mesh,
    unproject,
)
from .errors import InvalidInputError
from .raster import render_label_depth
from .spatial import random_downsample


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


def superquadric_mesh(
    radii=(1.0, 1.0, 1.0),
    e1: float = 1.0,
    e2: float = 1.0,
    n_lat: int = 16,
    n_lon: int = 32,
    level: int = 0,
    transform: RigidTransform | None = None,
) -> TriangleMesh:
    """Closed mesh on a latitude/longitude grid with single-vertex poles."""
    if n_lat < 2 or n_lon < 3:
        raise InvalidInputError("need n_lat >= 2 and n_lon >= 3")
    a = np.asarray(radii, dtype=np.float64)
    eta = np.linspace(-np.pi / 2, np.pi / 2, n_lat + 1)[1:-1]
    omega = np.linspace(-np.pi, np.pi, n_lon, endpoint=False)
    ee, oo = np.meshgrid(eta, omega, indexing="ij")
    ce, se = _spow(np.cos(ee), e1), _spow(np.sin(ee), e1)
    ring = np.stack([a[0] * ce * _spow(np.cos(oo), e2), a[1] * ce * _spow(np.sin(oo), e2), a[2] * se], axis=-1)
    verts = np.concatenate([[[0, 0, -a[2]]], ring.reshape(-1, 3), [[0, 0, a[2]]]])
    rings = n_lat - 1
    idx = lambda i, j: 1 + i * n_lon + (j % n_lon)  # noqa: E731
    tris = []
    top = len(verts) - 1
    for j in range(n_lon):
        tris.append((0, idx(0, j + 1), idx(0, j)))
        tris.append((top, idx(rings - 1, j), idx(rings - 1, j + 1)))
    for i in range(rings - 1):
        for j in range(n_lon):
            tris.append((idx(i, j), idx(i, j + 1), idx(i + 1, j + 1)))
            tris.append((idx(i, j), idx(i + 1, j + 1), idx(i + 1, j)))
    mesh = TriangleMesh(verts, np.array(tris, dtype=np.int64), level)
    return transform_mesh(transform, mesh) if transform is not None else mesh


def random_shape(rng: np.random.Generator, sphere_prob: float = 0.3) -> TriangleMesh:
    """A sphere or a randomly proportioned, randomly oriented superquadric."""
    if rng.random() < sphere_prob:
        return superquadric_mesh((1.0, 1.0, 1.0))
    radii = rng.uniform(0.5, 1.5, size=3)
    e1, e2 = rng.uniform(0.4, 1.4, size=2)
    return superquadric_mesh(radii, e1, e2, transform=RigidTransform.random(rng, 0.0))


def half_space_cut(points: np.ndarray, direction: np.ndarray, remove_fraction: float) -> np.ndarray:
    """Boolean mask keeping points on the far side of a plane normal to ``direction``.

    The plane sits at the ``remove_fraction`` quantile of the projections, so
    that fraction of the points (up to ties) is removed.
    """
    d = np.asarray(direction, dtype=np.float64)
    s = points @ (d / np.linalg.norm(d))
    k = int(round(remove_fraction * len(points)))
    order = np.argsort(s, kind="stable")
    keep = np.ones(len(points), dtype=bool)
    keep[order[:k]] = False
    return keep


@dataclass(frozen=True)
class OccludedPair:
    partial: PointCloud
    complete: PointCloud
    removed_fraction: float


def occluded_pair(
    mesh: TriangleMesh,
    n_complete: int,
    n_partial: int,
    rng: np.random.Generator,
    remove_range=(0.40, 0.75),
) -> OccludedPair:
    seed = int(rng.integers(2**31))
    complete = sample_mesh_surface(mesh, n_complete, seed)
    dense = sample_mesh_surface(mesh, 4 * n_complete, seed + 1)
    frac = float(rng.uniform(*remove_range))
    keep = half_space_cut(dense.points, rng.normal(size=3), frac)
    partial = random_downsample(dense.subset(np.nonzero(keep)[0]), n_partial, seed + 2)
    return OccludedPair(partial, complete, 1.0 - keep.mean())


def completion_dataset(
    n_shapes: int, n_complete: int, n_partial: int, seed: int = 0, remove_range=(0.40, 0.75)
) -> list[OccludedPair]:
    rng = np.random.default_rng(seed)
    return [occluded_pair(random_shape(rng), n_complete, n_partial, rng, remove_range) for _ in range(n_shapes)]


# -- RGB-D fixture ----------------------------------------------------------------


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> RigidTransform:
    """World-to-camera transform for a camera at ``eye`` looking at ``target`` (z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return RigidTransform(r, -r @ eye)


def vertebra_meshes(rng: np.random.Generator, levels=(1, 2, 3), spacing: float = 30.0) -> list[TriangleMesh]:
    """A short column of flattened superquadrics standing in for lumbar vertebrae (CT frame, mm)."""
    meshes = []
    for i, level in enumerate(levels):
        radii = (rng.uniform(18, 22), rng.uniform(11, 14), rng.uniform(9, 11))
        e1, e2 = rng.uniform(0.5, 0.9), rng.uniform(0.6, 1.0)
        centre = np.array([0.0, 0.0, i * spacing]) + rng.normal(scale=1.0, size=3)
        t = RigidTransform.from_axis_angle([0, 0, 1], rng.normal(scale=0.1), centre)
        meshes.append(superquadric_mesh(radii, e1, e2, n_lat=12, n_lon=24, level=level, transform=t))
    return meshes


def render_frame(meshes, pose: RigidTransform, intr: CameraIntrinsics, background_mm: float = 0.0):
    """Label image, integer-mm depth image and a flat-shaded colour image for one view."""
    labels, depth = render_label_depth(meshes, pose, intr)
    covered = np.isfinite(depth)
    d = np.where(covered, np.round(depth), background_mm)
    palette = np.array([[0.1, 0.1, 0.1], [0.9, 0.3, 0.3], [0.3, 0.9, 0.3], [0.3, 0.3, 0.9], [0.9, 0.9, 0.3], [0.9, 0.3, 0.9]])
    color = palette[np.clip(labels, 0, len(palette) - 1)]
    return labels, DepthImage(d), color


def make_fixture(
    root,
    n_specimens: int = 2,
    n_views: int = 2,
    levels=(1, 2, 3),
    seed: int = 0,
    width: int = 96,
    height: int = 72,
) -> str:
    """Write a small RGB-D dataset to ``root`` and return the manifest path.

    Each frame also ships an external label file produced by looking points
    up in the rendered level mask, standing in for a segmentation network.
    """
    from .io import write_color_png, write_depth_png, write_intrinsics, write_json, write_label_png, write_pose, write_ply
    from .pipeline import lookup_mask_labels, write_label_file

    rng = np.random.default_rng(seed)
    os.makedirs(root, exist_ok=True)
    intr = CameraIntrinsics(80.0, 80.0, (width - 1) / 2, (height - 1) / 2, width, height)
    write_intrinsics(os.path.join(root, "intrinsics.json"), intr)
    frames, specimens = [], {}
    for s in range(n_specimens):
        sid = f"S{s + 1}"
        meshes = vertebra_meshes(rng, levels)
        mesh_paths = {}
        for m in meshes:
            rel = f"meshes/{sid}_L{m.level}.ply"
            os.makedirs(os.path.join(root, "meshes"), exist_ok=True)
            write_ply(os.path.join(root, rel), m, binary=(m.level % 2 == 1))
            mesh_paths[str(m.level)] = rel
        specimens[sid] = {"meshes": mesh_paths}
        centre = np.mean([m.vertices.mean(0) for m in meshes], axis=0)
        for v in range(n_views):
            angle = -0.5 + v * 1.0 / max(n_views - 1, 1) + rng.normal(scale=0.05)
            eye = centre + np.array([np.sin(angle) * 160.0, -150.0, np.cos(angle) * 40.0])
            pose = look_at(eye, centre, up=(0.0, 0.0, 1.0))
            labels, depth, color = render_frame(meshes, pose, intr)
            fid = f"{sid}_v{v}"
            paths = {k: f"frames/{fid}_{k}" for k in ("depth.png", "color.png", "mask.png", "pose.json", "labels.csv")}
            os.makedirs(os.path.join(root, "frames"), exist_ok=True)
            write_depth_png(os.path.join(root, paths["depth.png"]), depth)
            write_color_png(os.path.join(root, paths["color.png"]), color)
            write_label_png(os.path.join(root, paths["mask.png"]), (labels > 0).astype(np.uint8))
            write_pose(os.path.join(root, paths["pose.json"]), pose)
            cloud = unproject(depth, intr, mask=None)
            write_label_file(os.path.join(root, paths["labels.csv"]), lookup_mask_labels(cloud, labels, intr))
            frames.append({
                "specimen": sid,
                "view": fid,
                "depth": paths["depth.png"],
                "color": paths["color.png"],
                "spine_mask": paths["mask.png"],
                "pose": paths["pose.json"],
                "labels": paths["labels.csv"],
                "intrinsics": "intrinsics.json",
            })
    manifest = {"version": 1, "units": "mm", "specimens": specimens, "frames": frames}
    path = os.path.join(root, "manifest.json")
    write_json(path, manifest)
    return path
