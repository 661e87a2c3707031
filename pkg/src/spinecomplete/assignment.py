"""Linear assignment solvers used by the Earth Mover's Distance.

``hungarian`` is the O(n^3) shortest-augmenting-path method with row/column
potentials and gives an optimal permutation.  ``auction`` is the
epsilon-scaling forward auction: every phase ends epsilon-complementary-slack,
so the final assignment costs at most ``n * eps`` more than the optimum.
"""
from __future__ import annotations

import math

import numpy as np

from . import _accel
from .errors import InvalidInputError


@_accel.njit
def _hungarian_kernel(cost, row_to_col):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.zeros(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1


def _hungarian_numpy(cost, row_to_col):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    padded = np.zeros((n + 1, n + 1))
    padded[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = padded[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col[p[1:] - 1] = np.arange(n)


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Optimal ``row -> column`` permutation minimising total cost of a square matrix."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise InvalidInputError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise InvalidInputError("cost matrix must be finite")
    out = np.empty(cost.shape[0], dtype=np.int64)
    if cost.shape[0]:
        fn = _hungarian_kernel if _accel.numba_enabled() else _hungarian_numpy
        fn(cost, out)
    return out


@_accel.njit
def _auction_phase_kernel(benefit, prices, eps, owner, assigned):
    n = benefit.shape[0]
    owner[:] = -1
    assigned[:] = -1
    queue = np.arange(n)
    head = 0
    tail = n  # circular queue of unassigned bidders
    count = n
    while count > 0:
        i = queue[head % n]
        head += 1
        count -= 1
        best = -np.inf
        second = -np.inf
        jbest = 0
        for j in range(n):
            val = benefit[i, j] - prices[j]
            if val > best:
                second = best
                best = val
                jbest = j
            elif val > second:
                second = val
        if n == 1:
            second = best
        prices[jbest] += best - second + eps
        prev = owner[jbest]
        owner[jbest] = i
        assigned[i] = jbest
        if prev >= 0:
            assigned[prev] = -1
            queue[tail % n] = prev
            tail += 1
            count += 1


def _auction_phase_numpy(benefit, prices, eps, owner, assigned):
    n = benefit.shape[0]
    owner[:] = -1
    assigned[:] = -1
    queue = list(range(n))
    head = 0
    while head < len(queue):
        i = queue[head]
        head += 1
        val = benefit[i] - prices
        jbest = int(np.argmax(val))
        best = val[jbest]
        if n == 1:
            second = best
        else:
            val[jbest] = -np.inf
            second = val.max()
        prices[jbest] += best - second + eps
        prev = owner[jbest]
        owner[jbest] = i
        assigned[i] = jbest
        if prev >= 0:
            assigned[prev] = -1
            queue.append(prev)


def auction_schedule(max_cost: float, eps: float, factor: float = 5.0) -> list[float]:
    """Epsilon values visited: powers of ``factor`` from ~max_cost/2 down, then ``eps``.

    Anchoring on a fixed grid makes the phases for a coarser target a prefix
    of those for a finer one.
    """
    if not eps > 0:
        raise InvalidInputError("epsilon must be positive")
    steps = []
    if max_cost > 0:
        m = math.floor(math.log(max(max_cost / 2.0, eps), factor))
        while True:
            e = factor ** m
            if e <= eps * (1 + 1e-12):
                break
            steps.append(e)
            m -= 1
    steps.append(eps)
    return steps


def auction(cost: np.ndarray, eps: float, factor: float = 5.0) -> np.ndarray:
    """Near-optimal ``row -> column`` permutation: total cost <= optimum + n * eps.

    Returns the cheapest assignment seen at the end of any scaling phase.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise InvalidInputError(f"cost matrix must be square, got {cost.shape}")
    n = cost.shape[0]
    if n == 0:
        return np.empty(0, dtype=np.int64)
    benefit = -cost
    prices = np.zeros(n)
    owner = np.empty(n, dtype=np.int64)
    assigned = np.empty(n, dtype=np.int64)
    fn = _auction_phase_kernel if _accel.numba_enabled() else _auction_phase_numpy
    best, best_cost = None, np.inf
    rows = np.arange(n)
    for e in auction_schedule(float(cost.max() - min(cost.min(), 0.0)), eps, factor):
        fn(benefit, prices, e, owner, assigned)
        total = cost[rows, assigned].sum()
        if total < best_cost:
            best, best_cost = assigned.copy(), total
    return best
