"""Exact nearest-neighbour search, farthest-point sampling and downsampling.

All neighbour queries order results by ``(squared distance, point index)``
so that ties resolve to the lower index on every platform and on both
backends.  Squared distances are always formed as ``dx*dx + dy*dy + dz*dz``
so the compiled tree search and the numpy brute force agree bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import EmptyCloudError, InvalidInputError
from .geometry import PointCloud

LEAF_SIZE = 16
_BRUTE_CHUNK = 1 << 22  # max query x point pairs held at once by the numpy path


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 3))


# --------------------------------------------------------------------------
# kd-tree


def _build_tree(points: np.ndarray, leaf_size: int):
    n = len(points)
    perm = np.arange(n, dtype=np.int64)
    starts, ends, lefts, rights, lo, hi = [], [], [], [], [], []

    def new_node(s, e):
        seg = points[perm[s:e]]
        starts.append(s)
        ends.append(e)
        lefts.append(-1)
        rights.append(-1)
        lo.append(seg.min(axis=0))
        hi.append(seg.max(axis=0))
        return len(starts) - 1

    root = new_node(0, n)
    stack = [root]
    while stack:
        node = stack.pop()
        s, e = starts[node], ends[node]
        if e - s <= leaf_size:
            continue
        dim = int(np.argmax(hi[node] - lo[node]))
        if hi[node][dim] == lo[node][dim]:
            continue  # all points coincide
        mid = (s + e) // 2
        seg = perm[s:e]
        order = np.argpartition(points[seg, dim], mid - s)
        perm[s:e] = seg[order]
        lefts[node] = new_node(s, mid)
        rights[node] = new_node(mid, e)
        stack.extend((lefts[node], rights[node]))

    return (
        perm,
        np.array(starts, dtype=np.int64),
        np.array(ends, dtype=np.int64),
        np.array(lefts, dtype=np.int64),
        np.array(rights, dtype=np.int64),
        np.array(lo, dtype=np.float64).reshape(-1, 3),
        np.array(hi, dtype=np.float64).reshape(-1, 3),
    )


@_accel.njit
def _tree_query(points, perm, starts, ends, lefts, rights, lo, hi, queries, k, out_idx, out_d2):
    stack = np.empty(256, dtype=np.int64)
    for qi in range(queries.shape[0]):
        qx = queries[qi, 0]
        qy = queries[qi, 1]
        qz = queries[qi, 2]
        bd = out_d2[qi]
        bi = out_idx[qi]
        for j in range(k):
            bd[j] = np.inf
            bi[j] = -1
        top = 0
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            # squared distance from the query to the node's box
            box = 0.0
            for a in range(3):
                q = queries[qi, a]
                if q < lo[node, a]:
                    box += (lo[node, a] - q) * (lo[node, a] - q)
                elif q > hi[node, a]:
                    box += (q - hi[node, a]) * (q - hi[node, a])
            if box > bd[k - 1]:
                continue
            if lefts[node] < 0:
                for s in range(starts[node], ends[node]):
                    p = perm[s]
                    dx = qx - points[p, 0]
                    dy = qy - points[p, 1]
                    dz = qz - points[p, 2]
                    d = dx * dx + dy * dy + dz * dz
                    if d < bd[k - 1] or (d == bd[k - 1] and p < bi[k - 1]):
                        j = k - 1
                        while j > 0 and (bd[j - 1] > d or (bd[j - 1] == d and bi[j - 1] > p)):
                            bd[j] = bd[j - 1]
                            bi[j] = bi[j - 1]
                            j -= 1
                        bd[j] = d
                        bi[j] = p
            else:
                l = lefts[node]
                r = rights[node]
                # visit the nearer child first
                cl = 0.0
                cr = 0.0
                for a in range(3):
                    q = queries[qi, a]
                    if q < lo[l, a]:
                        cl += (lo[l, a] - q) * (lo[l, a] - q)
                    elif q > hi[l, a]:
                        cl += (q - hi[l, a]) * (q - hi[l, a])
                    if q < lo[r, a]:
                        cr += (lo[r, a] - q) * (lo[r, a] - q)
                    elif q > hi[r, a]:
                        cr += (q - hi[r, a]) * (q - hi[r, a])
                if top + 2 > stack.shape[0]:
                    grown = np.empty(stack.shape[0] * 2, dtype=np.int64)
                    grown[:top] = stack[:top]
                    stack = grown
                if cl <= cr:
                    stack[top] = r
                    stack[top + 1] = l
                else:
                    stack[top] = l
                    stack[top + 1] = r
                top += 2


def _brute_query(points, queries, k):
    n = len(points)
    idx = np.empty((len(queries), k), dtype=np.int64)
    d2 = np.empty((len(queries), k), dtype=np.float64)
    step = max(1, _BRUTE_CHUNK // max(n, 1))
    for s in range(0, len(queries), step):
        q = queries[s:s + step]
        dx = q[:, None, 0] - points[None, :, 0]
        dy = q[:, None, 1] - points[None, :, 1]
        dz = q[:, None, 2] - points[None, :, 2]
        d = dx * dx + dy * dy + dz * dz
        if k < n:
            # keep every candidate tied with the k-th distance, then stable-sort
            kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
            d = np.where(d <= kth, d, np.inf)
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[s:s + step] = order
        d2[s:s + step] = np.take_along_axis(d, order, axis=1)
    return idx, d2


class SpatialIndex:
    """Immutable exact 3-D neighbour index over a point set.

    Uses a kd-tree when numba is enabled and a chunked brute-force scan
    otherwise; both return identical results.
    """

    def __init__(self, points, leaf_size: int = LEAF_SIZE):
        self.points = _as_points(points).copy()
        self.points.flags.writeable = False
        self.leaf_size = leaf_size
        self._tree = None

    def __len__(self) -> int:
        return len(self.points)

    def _get_tree(self):
        if self._tree is None:
            self._tree = _build_tree(self.points, self.leaf_size)
        return self._tree

    def query(self, queries, k: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(indices, squared distances)``, each of shape (Q, k)."""
        q = _as_points(queries)
        if k < 1:
            raise InvalidInputError("k must be >= 1")
        if k > len(self.points):
            raise InvalidInputError(f"k={k} exceeds the {len(self.points)} indexed points")
        if _accel.numba_enabled():
            idx = np.empty((len(q), k), dtype=np.int64)
            d2 = np.empty((len(q), k), dtype=np.float64)
            if len(q):
                _tree_query(self.points, *self._get_tree(), q, k, idx, d2)
            return idx, d2
        return _brute_query(self.points, q, k)


def knn(index: SpatialIndex, query, k: int) -> list[tuple[int, float]]:
    """k nearest ``(index, distance)`` pairs for a single query point."""
    idx, d2 = index.query(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
    return [(int(i), float(np.sqrt(d))) for i, d in zip(idx[0], d2[0])]


def nearest_sq_dist(points, targets) -> tuple[np.ndarray, np.ndarray]:
    """Nearest target for every point: ``(indices, squared distances)``."""
    targets = _as_points(targets)
    if len(targets) == 0:
        raise EmptyCloudError("nearest-neighbour target set is empty")
    idx, d2 = SpatialIndex(targets).query(points, 1)
    return idx[:, 0], d2[:, 0]


def knn_graph(points, k: int, include_self: bool = False) -> np.ndarray:
    """(N, k) neighbour indices of every point within its own cloud.

    With ``include_self=False`` the point itself is removed from its list even
    when duplicates tie with it.
    """
    pts = _as_points(points)
    n = len(pts)
    if include_self:
        return SpatialIndex(pts).query(pts, k)[0]
    if k >= n:
        raise InvalidInputError(f"k={k} must be smaller than the {n} points")
    idx = SpatialIndex(pts).query(pts, k + 1)[0]
    me = np.arange(n)[:, None]
    is_self = idx == me
    # rows without self in the first k+1 (duplicates) drop their last entry
    drop = np.where(is_self.any(1), is_self.argmax(1), k)
    keep = np.ones_like(idx, dtype=bool)
    keep[np.arange(n), drop] = False
    return idx[keep].reshape(n, k)


# --------------------------------------------------------------------------
# sampling


@_accel.njit
def _fps_kernel(points, n, start, out):
    m = points.shape[0]
    mind = np.full(m, np.inf)
    cur = start
    for i in range(n):
        out[i] = cur
        px = points[cur, 0]
        py = points[cur, 1]
        pz = points[cur, 2]
        best = -1.0
        nxt = 0
        for j in range(m):
            dx = points[j, 0] - px
            dy = points[j, 1] - py
            dz = points[j, 2] - pz
            d = dx * dx + dy * dy + dz * dz
            if d < mind[j]:
                mind[j] = d
            if mind[j] > best:
                best = mind[j]
                nxt = j
        cur = nxt


def _fps_numpy(points, n, start, out):
    mind = np.full(len(points), np.inf)
    cur = start
    for i in range(n):
        out[i] = cur
        d = points - points[cur]
        mind = np.minimum(mind, d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
        cur = int(np.argmax(mind))


def fps_indices(points, n: int, start: int = 0) -> np.ndarray:
    pts = _as_points(points)
    if not 1 <= n <= len(pts):
        raise InvalidInputError(f"cannot pick {n} of {len(pts)} points")
    out = np.empty(n, dtype=np.int64)
    fn = _fps_kernel if _accel.numba_enabled() else _fps_numpy
    fn(pts, n, int(start), out)
    return out


def fps(pc: PointCloud, n: int, seed: int = 0, start: int | None = None) -> PointCloud:
    """Farthest-point sampling; the first point is drawn from ``seed`` unless ``start`` is given."""
    if not 1 <= n <= len(pc):
        raise InvalidInputError(f"cannot pick {n} of {len(pc)} points")
    if start is None:
        start = int(np.random.default_rng(seed).integers(len(pc)))
    return pc.subset(fps_indices(pc.points, n, start))


def random_downsample(pc: PointCloud, n: int, seed: int = 0) -> PointCloud:
    """Uniform subset of ``n`` points; pads with replacement when ``n > len(pc)``."""
    if len(pc) == 0:
        raise EmptyCloudError("cannot resample an empty cloud")
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(pc))
    if n <= len(pc):
        idx = idx[:n]
    else:
        idx = np.concatenate([idx, rng.integers(len(pc), size=n - len(pc))])
    return pc.subset(idx)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    origin: np.ndarray
    voxel_size: float
    cells: np.ndarray  # (K, 3) unique occupied cells, lexicographically sorted

    @property
    def occupied(self) -> set[tuple[int, int, int]]:
        return {tuple(int(x) for x in c) for c in self.cells}

    def __len__(self) -> int:
        return len(self.cells)


def voxel_cells(points, origin, voxel_size: float) -> np.ndarray:
    if not voxel_size > 0:
        raise InvalidInputError("voxel_size must be positive")
    pts = _as_points(points)
    return np.floor((pts - np.asarray(origin, dtype=np.float64)) / voxel_size).astype(np.int64)


def occupancy(pc: PointCloud, origin, voxel_size: float) -> VoxelGrid:
    cells = voxel_cells(pc.points if isinstance(pc, PointCloud) else pc, origin, voxel_size)
    cells = np.unique(cells, axis=0) if len(cells) else cells.reshape(0, 3)
    return VoxelGrid(np.asarray(origin, dtype=np.float64), float(voxel_size), cells)


def voxel_downsample(pc: PointCloud, voxel_size: float, origin=None) -> PointCloud:
    """One centroid per occupied voxel (grid anchored at the cloud's min corner).

    Colours are averaged; labels take the majority, lowest id on ties.
    Output is ordered by voxel index.
    """
    if not voxel_size > 0:
        raise InvalidInputError("voxel_size must be positive")
    if len(pc) == 0:
        return pc
    if origin is None:
        origin = pc.points.min(axis=0)
    cells = voxel_cells(pc.points, origin, voxel_size)
    uniq, inv = np.unique(cells, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    m = len(uniq)
    counts = np.bincount(inv, minlength=m).astype(np.float64)

    def mean(values):
        return np.stack([np.bincount(inv, values[:, a], minlength=m) for a in range(values.shape[1])], 1) / counts[:, None]

    pts = mean(pc.points)
    cols = None if pc.colors is None else mean(pc.colors)
    labs = None
    if pc.labels is not None:
        pairs, pc_counts = np.unique(np.stack([inv, pc.labels], 1), axis=0, return_counts=True)
        order = np.lexsort((pairs[:, 1], -pc_counts, pairs[:, 0]))
        pairs = pairs[order]
        first = np.ones(len(pairs), dtype=bool)
        first[1:] = pairs[1:, 0] != pairs[:-1, 0]
        labs = np.empty(m, dtype=np.int64)
        labs[pairs[first, 0]] = pairs[first, 1]
    return PointCloud(pts, cols, labs)


def downsample_to(pc: PointCloud, n: int, voxel_size: float | None = None, method: str = "voxel", seed: int = 0) -> PointCloud:
    """Reach exactly ``n`` points: voxel grid then random pick (default) or FPS."""
    if method == "fps":
        return fps(pc, min(n, len(pc)), seed) if len(pc) >= n else random_downsample(pc, n, seed)
    if method != "voxel":
        raise InvalidInputError(f"unknown downsampling method {method!r}")
    if voxel_size is not None and len(pc) > n:
        reduced = voxel_downsample(pc, voxel_size)
        if len(reduced) >= n:
            pc = reduced
    return random_downsample(pc, n, seed)
