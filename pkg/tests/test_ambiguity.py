import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcfusion.ambiguity import (between_sat_difference, decorrelate, integer_search, ld_factorization,
                                ratio_statistic, ratio_test_and_apply, reference_satellites)
from tcfusion.filter import FilterState
from tcfusion.ins import INS_DIM, NavState


def random_problem(rng, n):
    B = rng.normal(size=(n, n)) * rng.uniform(0.05, 0.5)
    Q = B @ B.T + np.eye(n) * rng.uniform(0.005, 0.05)
    a = rng.normal(size=n) * 5
    return a, Q


def brute_force(a, Q, half=3):
    """Every integer vector in a +-half box around round(a), best two by quadratic form."""
    Qi = np.linalg.inv(Q)
    c = np.round(a)
    grid = np.array(list(itertools.product(range(-half, half + 1), repeat=len(a))), dtype=float) + c
    d = grid - a
    q = np.einsum("ij,jk,ik->i", d, Qi, d)
    order = np.argsort(q)[:2]
    return grid[order], q[order]


def test_ld_factorization_reconstructs():
    rng = np.random.default_rng(0)
    _, Q = random_problem(rng, 5)
    L, D = ld_factorization(Q)
    np.testing.assert_allclose(L.T @ np.diag(D) @ L, Q, atol=1e-12)
    np.testing.assert_allclose(np.diag(L), 1.0)
    assert np.all(np.triu(L, 1) == 0)
    with pytest.raises(ValueError):
        ld_factorization(-np.eye(2))
    with pytest.raises(ValueError):
        ld_factorization(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_search_matches_brute_force_box():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        a, Q = random_problem(rng, n)
        cand, qf = integer_search(a, Q, 2)
        ref, qref = brute_force(a, Q)
        np.testing.assert_array_equal(cand[:, 0], ref[0])
        np.testing.assert_allclose(qf, qref, rtol=1e-9, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 8))
def test_z_transform_is_unimodular(seed, n):
    rng = np.random.default_rng(seed)
    _, Q = random_problem(rng, n)
    Z, Qz = decorrelate(Q)
    assert np.all(Z == np.round(Z))
    assert abs(round(np.linalg.det(Z))) == 1
    assert abs(np.linalg.det(Z)) == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(Qz, Z.T @ Q @ Z, atol=1e-12)
    # decorrelation never worsens the product of conditional variances
    assert np.prod(ld_factorization(Qz)[1]) == pytest.approx(np.prod(ld_factorization(Q)[1]), rel=1e-8)


def test_integer_input_is_its_own_solution():
    Q = np.array([[0.5, 0.45], [0.45, 0.5]])
    cand, qf = integer_search(np.array([3.0, -7.0]), Q)
    np.testing.assert_array_equal(cand[:, 0], [3, -7])
    assert qf[0] == 0.0
    assert ratio_statistic(qf) == np.inf
    assert ratio_statistic([1.0]) == 0.0
    assert ratio_statistic([0.5, 2.0]) == 4.0


def test_between_sat_difference():
    keys = [("G01", "GPS", "L1"), ("G02", "GPS", "L1"), ("G03", "GPS", "L1")]
    elev = [0.3, 1.2, 0.5]
    a = np.array([10.0, 4.0, 7.5])
    Q = np.diag([0.1, 0.2, 0.3])
    fa = between_sat_difference(a, Q, keys, elev)
    assert fa.keys == [("G02", "G01", "GPS", "L1"), ("G02", "G03", "GPS", "L1")]
    np.testing.assert_allclose(fa.a, [6.0, 3.5])
    np.testing.assert_allclose(fa.Q, fa.D @ Q @ fa.D.T)
    np.testing.assert_allclose(fa.Q, [[0.3, 0.2], [0.2, 0.5]])
    assert reference_satellites({("C02", "BDS", "B1I"): 1.0, ("C01", "BDS", "B1I"): 1.0}) == {("BDS", "B1I"): "C01"}


def _state_with_ambiguities(values, sigma):
    fs = FilterState(NavState(), np.eye(INS_DIM) * 0.01)
    for i, v in enumerate(values):
        k = (f"G{i + 1:02d}", "L1")
        fs._insert(("amb",) + k, P0=np.array([[sigma ** 2]]))
        fs.amb[k] = float(v)
    return fs


def test_ratio_test_applies_on_copy():
    vals = [3.02, 5.98, -1.01, 8.0, 2.99, 11.03]
    fs = _state_with_ambiguities(vals, 0.02)
    P_before = fs.P.copy()
    elev = {(f"G{i + 1:02d}", "L1"): 0.2 + 0.1 * i for i in range(len(vals))}
    fixed, res = ratio_test_and_apply(fs, elev)
    assert res.applied and res.ratio >= 2.0
    assert fixed.fix_status == "fixed" and fs.fix_status == "float"
    # input state untouched, so dropping the fix reverts exactly
    np.testing.assert_array_equal(fs.P, P_before)
    assert [fs.amb[k] for k in elev] == vals
    ref = "G06"
    for s in ("G01", "G02", "G03", "G04", "G05"):
        dd = fixed.amb[(ref, "L1")] - fixed.amb[(s, "L1")]
        assert dd == pytest.approx(round(vals[5] - vals[int(s[1:]) - 1]), abs=1e-9)


def test_ratio_test_retains_float_when_ambiguous():
    vals = [3.5, 6.5, -1.5, 8.5, 2.5, 11.0]
    fs = _state_with_ambiguities(vals, 0.3)
    elev = {(f"G{i + 1:02d}", "L1"): 0.2 + 0.1 * i for i in range(len(vals))}
    fixed, res = ratio_test_and_apply(fs, elev)
    assert fixed is None and not res.applied
    assert res.ratio < 2.0
    fixed, res = ratio_test_and_apply(fs, elev, max_std=0.1)
    assert fixed is None and res.reason == "float ambiguities not converged"
    fixed, res = ratio_test_and_apply(fs, dict(list(elev.items())[:3]))
    assert fixed is None and res.reason == "too few double differences"
