import numpy as np
import pytest

from spinecomplete.geometry import (
    BinaryMask,
    CameraIntrinsics,
    RigidTransform,
    TriangleMesh,
    mask_bbox,
    project,
    sample_mesh_surface,
    transform_mesh,
)
from spinecomplete.raster import render_label_depth, render_mask
from spinecomplete.synthetic import superquadric_mesh

INTR = CameraIntrinsics(100.0, 100.0, 31.5, 23.5, 64, 48)


def _tri(z, level, size=20.0):
    return TriangleMesh([[-size, -size, z], [size, -size, z], [0, size, z]], [[0, 1, 2]], level)


def test_triangle_covers_principal_pixel(backend):
    mask = render_mask([_tri(100.0, 3)], RigidTransform(), INTR)
    assert mask.values[23, 31] == 3
    # analytic point-in-triangle check for every pixel centre
    v, u = np.mgrid[0:48, 0:64]
    x = (u - INTR.cx) * 100.0 / INTR.fx
    y = (v - INTR.cy) * 100.0 / INTR.fy
    inside = (y >= -20) & (y <= 20 - 2 * np.abs(x)) & (np.abs(x) <= 20)
    strict = (y > -20 + 1e-9) & (y < 20 - 2 * np.abs(x) - 1e-9)
    got = mask.values == 3
    assert np.all(got[strict])
    assert not np.any(got & ~inside)


def test_behind_camera_is_empty(backend):
    mask = render_mask([_tri(-5.0, 1)], RigidTransform(), INTR)
    assert not mask.values.any()


def test_nearer_mesh_wins(backend):
    labels, depth = render_label_depth([_tri(200.0, 2, 40.0), _tri(100.0, 1, 20.0)], RigidTransform(), INTR)
    assert labels[23, 31] == 1
    assert depth[23, 31] == pytest.approx(100.0)
    labels, _ = render_label_depth([_tri(100.0, 1, 20.0), _tri(200.0, 2, 40.0)], RigidTransform(), INTR)
    assert labels[23, 31] == 1


def test_backends_agree(rng):
    from spinecomplete import _accel

    meshes = [superquadric_mesh((15, 10, 8), 0.7, 0.9, level=i + 1,
                                transform=RigidTransform.random(rng, 10.0) @ RigidTransform(np.eye(3), [0, 0, 150]))
              for i in range(3)]
    with _accel.use_numba(True):
        a = render_label_depth(meshes, RigidTransform(), INTR)
    with _accel.use_numba(False):
        b = render_label_depth(meshes, RigidTransform(), INTR)
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])


def test_mask_matches_dense_samples_and_bbox(backend):
    t = RigidTransform.from_axis_angle([1, 1, 0], 0.4, [0, 0, 120])
    mesh = superquadric_mesh((20, 14, 10), 0.8, 0.8, n_lat=20, n_lon=40, level=4)
    mask = render_mask([mesh], t, INTR)
    pts = sample_mesh_surface(transform_mesh(t, mesh), 50_000, 0)
    uvd, _ = project(pts, INTR)
    u = np.round(uvd[:, 0]).astype(int)
    v = np.round(uvd[:, 1]).astype(int)
    ok = (u >= 0) & (u < 64) & (v >= 0) & (v < 48)
    sampled = np.zeros((48, 64), dtype=bool)
    sampled[v[ok], u[ok]] = True
    rendered = mask.values != 0
    # the two pixel sets agree up to a one-pixel boundary band
    from scipy.ndimage import binary_dilation

    assert not np.any(rendered & ~binary_dilation(sampled))
    assert not np.any(sampled & ~binary_dilation(rendered))
    box = mask_bbox(BinaryMask(rendered))
    vert, _ = project(transform_mesh(t, mesh).vertices, INTR)
    for uu, vv, _ in vert:
        if 0 <= uu < 64 and 0 <= vv < 48:
            assert box.u_min - 1 <= uu <= box.u_max + 1 and box.v_min - 1 <= vv <= box.v_max + 1


def test_needs_a_mesh():
    from spinecomplete.errors import InvalidInputError

    with pytest.raises(InvalidInputError):
        render_mask([], RigidTransform(), INTR)
