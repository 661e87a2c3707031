"""Z-buffer rasterisation of labelled triangle meshes into masks.

Coverage is tested at integer pixel centres with a top-left fill rule, so a
pixel on an edge shared by two triangles is drawn exactly once.  Both
windings are drawn (masks, not shading).  Triangles with a vertex at or
behind the near plane are skipped; depth is interpolated perspective-correct
and the nearest surface wins, ties going to the triangle drawn first.
"""
from __future__ import annotations

import numpy as np

from . import _accel
from .errors import InvalidInputError
from .geometry import BinaryMask, CameraIntrinsics, RigidTransform, TriangleMesh

NEAR_PLANE_MM = 1e-3


def _project_corners(corners: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """(T, 3, 3) camera-space corners -> (T, 3, 3) rows of (u, v, z)."""
    z = corners[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * corners[..., 0] / z + intr.cx
        v = intr.fy * corners[..., 1] / z + intr.cy
    return np.stack([u, v, z], axis=-1)


@_accel.njit
def _raster_kernel(uvz, tri_label, width, height, near, label_out, depth_out):
    for t in range(uvz.shape[0]):
        z0 = uvz[t, 0, 2]
        z1 = uvz[t, 1, 2]
        z2 = uvz[t, 2, 2]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        au = uvz[t, 0, 0]
        av = uvz[t, 0, 1]
        bu = uvz[t, 1, 0]
        bv = uvz[t, 1, 1]
        cu = uvz[t, 2, 0]
        cv = uvz[t, 2, 1]
        area = (bu - au) * (cv - av) - (bv - av) * (cu - au)
        if area == 0.0:
            continue
        if area < 0.0:
            bu, cu = cu, bu
            bv, cv = cv, bv
            z1, z2 = z2, z1
            area = -area
        umin = max(int(np.ceil(min(au, bu, cu))), 0)
        umax = min(int(np.floor(max(au, bu, cu))), width - 1)
        vmin = max(int(np.ceil(min(av, bv, cv))), 0)
        vmax = min(int(np.floor(max(av, bv, cv))), height - 1)
        # top-left flags for edges bc, ca, ab
        d_u = cu - bu
        d_v = cv - bv
        tl0 = d_v < 0.0 or (d_v == 0.0 and d_u > 0.0)
        d_u = au - cu
        d_v = av - cv
        tl1 = d_v < 0.0 or (d_v == 0.0 and d_u > 0.0)
        d_u = bu - au
        d_v = bv - av
        tl2 = d_v < 0.0 or (d_v == 0.0 and d_u > 0.0)
        for v in range(vmin, vmax + 1):
            for u in range(umin, umax + 1):
                e0 = (cu - bu) * (v - bv) - (cv - bv) * (u - bu)
                e1 = (au - cu) * (v - cv) - (av - cv) * (u - cu)
                e2 = (bu - au) * (v - av) - (bv - av) * (u - au)
                if e0 < 0.0 or e1 < 0.0 or e2 < 0.0:
                    continue
                if (e0 == 0.0 and not tl0) or (e1 == 0.0 and not tl1) or (e2 == 0.0 and not tl2):
                    continue
                inv_z = (e0 / z0 + e1 / z1 + e2 / z2) / area
                z = 1.0 / inv_z
                if z < depth_out[v, u]:
                    depth_out[v, u] = z
                    label_out[v, u] = tri_label[t]


def _raster_numpy(uvz, tri_label, width, height, near, label_out, depth_out):
    for t in range(uvz.shape[0]):
        (au, av, z0), (bu, bv, z1), (cu, cv, z2) = uvz[t]
        if z0 <= near or z1 <= near or z2 <= near:
            continue
        area = (bu - au) * (cv - av) - (bv - av) * (cu - au)
        if area == 0.0:
            continue
        if area < 0.0:
            bu, cu, bv, cv, z1, z2, area = cu, bu, cv, bv, z2, z1, -area
        umin = max(int(np.ceil(min(au, bu, cu))), 0)
        umax = min(int(np.floor(max(au, bu, cu))), width - 1)
        vmin = max(int(np.ceil(min(av, bv, cv))), 0)
        vmax = min(int(np.floor(max(av, bv, cv))), height - 1)
        if umin > umax or vmin > vmax:
            continue
        v, u = np.mgrid[vmin:vmax + 1, umin:umax + 1].astype(np.float64)
        e0 = (cu - bu) * (v - bv) - (cv - bv) * (u - bu)
        e1 = (au - cu) * (v - cv) - (av - cv) * (u - cu)
        e2 = (bu - au) * (v - av) - (bv - av) * (u - au)
        inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
        for e, (du, dv) in ((e0, (cu - bu, cv - bv)), (e1, (au - cu, av - cv)), (e2, (bu - au, bv - av))):
            if not (dv < 0.0 or (dv == 0.0 and du > 0.0)):
                inside &= e != 0.0
        if not inside.any():
            continue
        z = 1.0 / ((e0 / z0 + e1 / z1 + e2 / z2) / area)
        vi = v[inside].astype(np.int64)
        ui = u[inside].astype(np.int64)
        zi = z[inside]
        closer = zi < depth_out[vi, ui]
        depth_out[vi[closer], ui[closer]] = zi[closer]
        label_out[vi[closer], ui[closer]] = tri_label[t]


def render_label_depth(
    meshes: list[TriangleMesh], t: RigidTransform, intr: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Rasterise meshes given in CT space; return (label image, depth image).

    Uncovered pixels have label 0 and depth ``inf``.
    """
    if not meshes:
        raise InvalidInputError("render_mask needs at least one mesh")
    corners = np.concatenate([t.apply_points(m.vertices)[m.triangles] for m in meshes]).reshape(-1, 3, 3)
    tri_label = np.concatenate([np.full(len(m.triangles), m.level, dtype=np.int64) for m in meshes])
    uvz = np.ascontiguousarray(_project_corners(corners, intr))
    labels = np.zeros(intr.shape, dtype=np.int64)
    depth = np.full(intr.shape, np.inf)
    fn = _raster_kernel if _accel.numba_enabled() else _raster_numpy
    fn(uvz, tri_label, intr.width, intr.height, NEAR_PLANE_MM, labels, depth)
    return labels, depth


def render_mask(meshes: list[TriangleMesh], t: RigidTransform, intr: CameraIntrinsics) -> BinaryMask:
    """Vertebra-level label mask: each pixel carries the nearest mesh's level."""
    labels, _ = render_label_depth(meshes, t, intr)
    return BinaryMask(labels)
