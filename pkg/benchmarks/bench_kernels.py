"""Numba vs numpy timings for every kernel that has both backends.

Run:  python benchmarks/bench_kernels.py [--repeat 3] [--scale 1.0]

Each row times the same call under ``use_numba(True)`` and
``use_numba(False)`` and checks the two results agree (exactly, or within
the stated tolerance).  The first numba call per kernel is a warm-up so
compile time is reported separately.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from spinecomplete import _accel
from spinecomplete.assignment import auction, hungarian
from spinecomplete.autodiff import scatter_add_rows
from spinecomplete.geometry import CameraIntrinsics, RigidTransform
from spinecomplete.io.png import decode_png, encode_png
from spinecomplete.pipeline import mesh_distances
from spinecomplete.raster import render_label_depth
from spinecomplete.spatial import SpatialIndex, fps_indices
from spinecomplete.synthetic import superquadric_mesh


def _time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def _same(a, b, tol):
    if isinstance(a, tuple):
        return all(_same(x, y, tol) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if tol == 0:
        return np.array_equal(a, b)
    return np.allclose(a, b, rtol=0, atol=tol, equal_nan=True)


def cases(scale: float):
    rng = np.random.default_rng(0)
    n = int(20000 * scale)
    pts = rng.normal(size=(n, 3))
    q = rng.normal(size=(n // 4, 3))
    yield "knn k=8", lambda: SpatialIndex(pts).query(q, 8), 0

    yield "fps 512", lambda: fps_indices(pts, 512, 0), 0

    m = int(200 * scale)
    cost = rng.random((m, m))
    yield f"hungarian {m}x{m}", lambda: hungarian(cost), 0

    a, b = rng.random((256, 3)), rng.random((256, 3))
    c = np.linalg.norm(a[:, None] - b[None], axis=2)
    yield "auction 256 eps=1e-3", lambda: auction(c, 1e-3), 0

    intr = CameraIntrinsics(300.0, 300.0, 159.5, 119.5, 320, 240)
    meshes = [superquadric_mesh((20, 15, 10), 0.7, 0.8, 24, 48, level=i + 1,
                                transform=RigidTransform(np.eye(3), [i * 25.0 - 25, 0, 150])) for i in range(3)]
    yield "raster 3 meshes 320x240", lambda: render_label_depth(meshes, RigidTransform(), intr), 0

    surf = rng.normal(size=(int(2000 * scale), 3)) * 20 + [0, 0, 150]
    cam_meshes = [superquadric_mesh((20, 15, 10), 0.7, 0.8, 12, 24, level=i + 1,
                                    transform=RigidTransform(np.eye(3), [i * 25.0 - 25, 0, 150])) for i in range(3)]
    yield "point-to-mesh distance", lambda: mesh_distances(surf, cam_meshes, cutoff=5.0), 1e-9

    img = (np.add.outer(np.arange(480), np.arange(640)) % 65536).astype(np.uint16)
    blob = _paeth_png(img)
    yield "png unfilter 640x480x16bit", lambda: decode_png(blob)[0], 0

    rows = rng.integers(0, 1000, size=200000)
    vals = rng.normal(size=(200000, 16))

    def scatter():
        out = np.zeros((1000, 16))
        scatter_add_rows(out, rows, vals)
        return out

    yield "scatter-add rows", scatter, 1e-9


def _paeth_png(img: np.ndarray) -> bytes:
    """Re-encode with Paeth filtering on every row, the slowest path to undo."""
    import struct
    import zlib

    from spinecomplete.io.png import SIGNATURE

    h, w = img.shape
    raw = img.astype(">u2").view(np.uint8).reshape(h, w * 2).astype(np.int64)
    out = np.zeros((h, w * 2 + 1), dtype=np.uint8)
    out[:, 0] = 4
    a = np.zeros_like(raw)
    a[:, 2:] = raw[:, :-2]
    b = np.zeros_like(raw)
    b[1:] = raw[:-1]
    c = np.zeros_like(raw)
    c[1:, 2:] = raw[:-1, :-2]
    p = a + b - c
    pa, pb, pc = np.abs(p - a), np.abs(p - b), np.abs(p - c)
    pred = np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))
    out[:, 1:] = (raw - pred) & 255

    def chunk(kind, data):
        return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(kind + data))

    base = encode_png(img)
    ihdr = base[8:8 + 25]
    return SIGNATURE + ihdr + chunk(b"IDAT", zlib.compress(out.tobytes())) + chunk(b"IEND", b"")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--scale", type=float, default=1.0)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba not installed; only the numpy backend can run")
        return 1
    print(f"{'kernel':32s} {'compile s':>10s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s}  agree")
    for name, fn, tol in cases(args.scale):
        with _accel.use_numba(True):
            t0 = time.perf_counter()
            fn()
            warm = time.perf_counter() - t0
            t_nb, out_nb = _time(fn, args.repeat)
        with _accel.use_numba(False):
            t_np, out_np = _time(fn, args.repeat)
        agree = _same(out_nb, out_np, tol)
        print(f"{name:32s} {max(warm - t_nb, 0):10.3f} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:8.1f}x  {agree}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
