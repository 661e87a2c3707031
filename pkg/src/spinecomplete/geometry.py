"""Point clouds, rigid transforms, the pinhole camera and triangle meshes.

Coordinates are millimetres throughout.  Images are indexed ``[v, u]``
(row, column) and pixel ``(u, v)`` has its centre at integer coordinates, so
the principal point ``(cx, cy)`` unprojects to the optical axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptyMaskError,
    InvalidInputError,
    ZeroAreaMeshError,
)

__all__ = [
    "PointCloud",
    "RigidTransform",
    "CameraIntrinsics",
    "DepthImage",
    "ColorImage",
    "BinaryMask",
    "BoundingBox2D",
    "TriangleMesh",
    "apply_transform",
    "unproject",
    "project",
    "mask_bbox",
    "sample_mesh_surface",
    "transform_mesh",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points with optional per-point colours in [0, 1] and integer labels.

    Label 0 is background, 1..5 are the lumbar levels L1..L5.
    """

    points: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        n = len(pts)
        if self.colors is not None:
            col = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(col) != n:
                raise DimensionMismatchError(f"{len(col)} colors for {n} points")
            object.__setattr__(self, "colors", _frozen(col))
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64).reshape(-1)
            if len(lab) != n:
                raise DimensionMismatchError(f"{len(lab)} labels for {n} points")
            object.__setattr__(self, "labels", _frozen(lab))

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index) -> "PointCloud":
        """Points selected by an index array or boolean mask; attributes follow."""
        return PointCloud(
            self.points[index],
            None if self.colors is None else self.colors[index],
            None if self.labels is None else self.labels[index],
        )

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.points, self.colors, labels)

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.colors, self.labels)

    @staticmethod
    def concat(clouds) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        cols = labs = None
        if all(c.colors is not None for c in clouds):
            cols = np.concatenate([c.colors for c in clouds])
        if all(c.labels is not None for c in clouds):
            labs = np.concatenate([c.labels for c in clouds])
        return PointCloud(pts, cols, labs)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """p' = R p + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise DimensionMismatchError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidInputError("transform has non-finite entries")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise InvalidInputError("rotation is not orthonormal with determinant +1")
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise DimensionMismatchError(f"expected a 4x4 matrix, got {m.shape}")
        if np.abs(m[3] - [0, 0, 0, 1]).max() > 1e-9:
            raise InvalidInputError("last row of a rigid transform must be 0 0 0 1")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        r = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
        return cls(r, translation)

    @classmethod
    def random(cls, rng: np.random.Generator, scale: float = 1.0) -> "RigidTransform":
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        r = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
        return cls(r, rng.normal(size=3) * scale)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """Composition: ``(a @ b)(p) == a(b(p))``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


class _Image:
    """Shared shape checks for the raster types (``values`` is ``[v, u, ...]``)."""

    def __init__(self, values):
        self.values = np.asarray(values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


class DepthImage(_Image):
    """Depth in millimetres; 0 marks an invalid pixel."""

    def __init__(self, values):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionMismatchError("depth image must be 2-D")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise InvalidInputError("depth values must be finite and non-negative")
        super().__init__(v)


class ColorImage(_Image):
    def __init__(self, values):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 3:
            raise DimensionMismatchError("color image must be H x W x 3")
        if np.any(v < 0) or np.any(v > 1):
            raise InvalidInputError("color channels must lie in [0, 1]")
        super().__init__(v)


class BinaryMask(_Image):
    """Boolean mask, or an integer label image where 0 means "off"."""

    def __init__(self, values):
        v = np.asarray(values)
        if v.ndim != 2:
            raise DimensionMismatchError("mask must be 2-D")
        if v.dtype != bool:
            v = v.astype(np.int64)
        super().__init__(v)

    def nonzero(self) -> np.ndarray:
        return self.values != 0


@dataclass(frozen=True)
class BoundingBox2D:
    u_min: int
    v_min: int
    u_max: int
    v_max: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.u_min, self.v_min, self.u_max, self.v_max)

    def contains(self, u: float, v: float) -> bool:
        return self.u_min <= u <= self.u_max and self.v_min <= v <= self.v_max


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    level: int = 0

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("mesh vertices must be finite")
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidInputError("triangle index out of range")
        if len(t) and np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise InvalidInputError("degenerate triangle with repeated vertex indices")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "triangles", _frozen(t))

    def corners(self) -> np.ndarray:
        """(T, 3, 3) array of triangle corner coordinates."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)

    def area_weighted_centroid(self) -> np.ndarray:
        a = self.areas()
        return (self.corners().mean(axis=1) * a[:, None]).sum(0) / a.sum()


def apply_transform(t: RigidTransform, pc: PointCloud) -> PointCloud:
    return pc.with_points(t.apply_points(pc.points))


def transform_mesh(t: RigidTransform, mesh: TriangleMesh) -> TriangleMesh:
    return TriangleMesh(t.apply_points(mesh.vertices), mesh.triangles, mesh.level)


def unproject(
    depth: DepthImage,
    intr: CameraIntrinsics,
    mask: BinaryMask | None = None,
    color: ColorImage | None = None,
    depth_scale: float = 1.0,
) -> PointCloud:
    """Back-project valid (and masked) depth pixels in row-major order.

    ``depth_scale`` converts stored depth units to millimetres.
    """
    if depth.shape != intr.shape:
        raise DimensionMismatchError(f"depth {depth.shape} vs intrinsics {intr.shape}")
    if mask is not None and mask.shape != intr.shape:
        raise DimensionMismatchError(f"mask {mask.shape} vs intrinsics {intr.shape}")
    if color is not None and color.shape != intr.shape:
        raise DimensionMismatchError(f"color {color.shape} vs intrinsics {intr.shape}")
    d = depth.values * depth_scale
    keep = d > 0
    if mask is not None:
        keep &= mask.nonzero()
    v, u = np.nonzero(keep)
    z = d[v, u]
    pts = np.stack([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z], axis=1)
    cols = None if color is None else color.values[v, u]
    return PointCloud(pts, cols)


def project(pc: PointCloud | np.ndarray, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project to ``(u, v, depth)`` rows.

    Returns the (N, 3) projections and a boolean ``valid`` array; points with
    z <= 0 are unprojectable and get NaN pixel coordinates.
    """
    pts = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    valid = z > 0
    out = np.full((len(pts), 3), np.nan)
    zs = z[valid]
    out[valid, 0] = intr.fx * pts[valid, 0] / zs + intr.cx
    out[valid, 1] = intr.fy * pts[valid, 1] / zs + intr.cy
    out[valid, 2] = zs
    return out, valid


def unproject_uvd(uvd: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Inverse of :func:`project` for continuous pixel coordinates."""
    u, v, d = np.asarray(uvd, dtype=np.float64).T
    return np.stack([(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d], axis=1)


def mask_bbox(mask: BinaryMask) -> BoundingBox2D:
    v, u = np.nonzero(mask.nonzero())
    if len(u) == 0:
        raise EmptyMaskError("cannot take the bounding box of an empty mask")
    return BoundingBox2D(int(u.min()), int(v.min()), int(u.max()), int(v.max()))


def sample_mesh_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud:
    """Draw ``n`` surface points, area-weighted across triangles and uniform within each."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    if len(mesh.triangles) == 0:
        raise InvalidInputError("mesh has no triangles")
    areas = mesh.areas()
    total = areas.sum()
    if not total > 0:
        raise ZeroAreaMeshError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    c = mesh.corners()[tri]
    pts = (1 - r1)[:, None] * c[:, 0] + (r1 * (1 - r2))[:, None] * c[:, 1] + (r1 * r2)[:, None] * c[:, 2]
    return PointCloud(pts, labels=np.full(n, mesh.level))
