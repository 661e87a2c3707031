import numpy as np
import pytest

from spinecomplete.errors import InvalidInputError
from spinecomplete.synthetic import completion_dataset, half_space_cut, look_at, superquadric_mesh


def test_superquadric_is_closed():
    mesh = superquadric_mesh((2, 1, 1), 0.6, 0.8, 10, 20)
    tris = mesh.triangles
    edges = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert np.all(counts == 2)  # every edge shared by exactly two faces
    assert len(mesh.vertices) - len(counts) + len(tris) == 2  # Euler characteristic of a sphere


def test_sphere_vertices_on_surface():
    mesh = superquadric_mesh((3, 3, 3))
    assert np.allclose(np.linalg.norm(mesh.vertices, axis=1), 3.0)
    with pytest.raises(InvalidInputError):
        superquadric_mesh(n_lat=1)


def test_half_space_cut_fraction(rng):
    pts = rng.normal(size=(1000, 3))
    keep = half_space_cut(pts, [0, 0, 1], 0.4)
    assert keep.sum() == 600
    assert pts[keep, 2].min() >= pts[~keep, 2].max()


def test_completion_dataset(rng):
    data = completion_dataset(5, 128, 64, seed=3)
    for d in data:
        assert len(d.partial) == 64 and len(d.complete) == 128
        assert 0.39 <= d.removed_fraction <= 0.76
    again = completion_dataset(5, 128, 64, seed=3)
    assert all(np.array_equal(a.partial.points, b.partial.points) for a, b in zip(data, again))


def test_look_at_points_camera_at_target():
    t = look_at([0, -100, 0], [0, 0, 0], up=(0, 0, 1))
    cam = t.apply_points(np.array([[0.0, 0, 0], [0, -100, 0]]))
    assert np.allclose(cam[0], [0, 0, 100]) and np.allclose(cam[1], 0)
    assert np.allclose(t.rotation @ t.rotation.T, np.eye(3))
