import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from mapfuse.assignment import brute_force, solve
from mapfuse.errors import ContractError


def test_hand_case():
    c = np.array([[4.0, 1, 3], [2, 0, 5], [3, 2, 2]])
    a = solve(c)
    np.testing.assert_array_equal(a.cols, [1, 0, 2])
    assert a.cost == 5.0


def test_against_brute_force_1000(rng):
    for trial in range(1000):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(1, 7))
        if trial % 3 == 0:
            c = rng.integers(0, 4, size=(n, m)).astype(float)  # many ties
        else:
            c = rng.uniform(-5, 5, size=(n, m))
        a, b = solve(c), brute_force(c)
        assert abs(a.cost - b.cost) < 1e-9
        # ties resolve to the lexicographically smallest row -> column map
        np.testing.assert_array_equal(a.cols, b.cols)


def test_against_scipy(rng):
    for _ in range(50):
        n, m = rng.integers(5, 40, size=2)
        c = rng.normal(size=(n, m))
        r, k = linear_sum_assignment(c)
        assert abs(solve(c).cost - c[r, k].sum()) < 1e-9


def test_rectangular_assigns_min_side():
    c = np.arange(12.0).reshape(3, 4)
    a = solve(c)
    assert len(a.pairs) == 3 and len(set(a.cols)) == 3
    t = solve(c.T)
    assert (t.cols >= 0).sum() == 3 and abs(t.cost - a.cost) < 1e-12


def test_all_ties_gives_identity():
    np.testing.assert_array_equal(solve(np.ones((5, 5))).cols, np.arange(5))


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-100, 100)), st.floats(-50, 50), st.floats(-50, 50))
def test_row_and_column_shift_invariance(c, r, k):
    n, m = c.shape
    base = solve(c)
    shifted = c.copy()
    if n <= m:
        shifted[0] += r      # every row is matched, so a row shift moves the total by r
        delta = r
    else:
        shifted[:, 0] += k
        delta = k
    s = solve(shifted)
    assert abs(s.cost - (base.cost + delta)) < 1e-7 * max(1.0, np.abs(shifted).max())


def test_inverse_map():
    a = solve(np.array([[0.0, 9, 9], [9, 9, 0]]))
    np.testing.assert_array_equal(a.inverse(3), [0, -1, 1])


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros(3), np.array([[np.nan, 1.0]])])
def test_rejects_bad_input(bad):
    with pytest.raises(ContractError):
        solve(bad)
