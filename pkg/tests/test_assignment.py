import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from spinecomplete.assignment import auction, auction_schedule, hungarian
from spinecomplete.errors import InvalidInputError


def _total(cost, phi):
    return cost[np.arange(len(cost)), phi].sum()


@pytest.mark.parametrize("n", [1, 2, 5, 17, 64])
def test_hungarian_optimal(backend, rng, n):
    for _ in range(5):
        cost = rng.random((n, n))
        phi = hungarian(cost)
        assert sorted(phi.tolist()) == list(range(n))
        r, c = linear_sum_assignment(cost)
        assert _total(cost, phi) == pytest.approx(cost[r, c].sum(), abs=1e-12)


def test_hungarian_integer_ties(backend, rng):
    cost = rng.integers(0, 3, size=(30, 30)).astype(float)
    r, c = linear_sum_assignment(cost)
    assert _total(cost, hungarian(cost)) == cost[r, c].sum()


def test_hungarian_backends_agree(rng):
    from spinecomplete import _accel

    cost = rng.random((80, 80))
    with _accel.use_numba(True):
        a = hungarian(cost)
    with _accel.use_numba(False):
        b = hungarian(cost)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("eps", [1e-1, 1e-3])
def test_auction_within_eps(backend, rng, eps):
    for _ in range(5):
        cost = rng.random((40, 40))
        phi = auction(cost, eps)
        assert sorted(phi.tolist()) == list(range(40))
        r, c = linear_sum_assignment(cost)
        opt = cost[r, c].sum()
        assert opt - 1e-12 <= _total(cost, phi) <= opt + 40 * eps


def test_auction_backends_agree(rng):
    from spinecomplete import _accel

    cost = rng.random((60, 60))
    with _accel.use_numba(True):
        a = auction(cost, 1e-3)
    with _accel.use_numba(False):
        b = auction(cost, 1e-3)
    assert np.array_equal(a, b)


def test_auction_schedule_prefix():
    coarse = auction_schedule(10.0, 1e-2)
    fine = auction_schedule(10.0, 1e-4)
    assert coarse[-1] == 1e-2 and fine[-1] == 1e-4
    assert coarse[:-1] == fine[: len(coarse) - 1]
    with pytest.raises(InvalidInputError):
        auction_schedule(1.0, 0.0)


def test_bad_inputs():
    with pytest.raises(InvalidInputError):
        hungarian(np.zeros((2, 3)))
    with pytest.raises(InvalidInputError):
        hungarian(np.array([[np.inf]]))
    assert hungarian(np.zeros((0, 0))).shape == (0,)
    assert auction(np.zeros((0, 0)), 1e-3).shape == (0,)
