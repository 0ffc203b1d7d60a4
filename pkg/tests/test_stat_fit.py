import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import ndtri

from asip_lab.errors import DataError, DomainError
from asip_lab.rng import key_of, seed_stream, uniforms
from asip_lab.stat_fit import (FitResult, TailCurve, ks_normal_test, lil_ratio, linear_fit,
                               replica_mean, stretched_exp_fit)


def normals(seed, n):
    return ndtri(uniforms(key_of(seed), np.arange(1, n + 1, dtype=np.uint64)))


def kolmogorov_sf(lam, terms=100):
    k = np.arange(1, terms + 1)
    return float(2.0 * np.sum((-1.0) ** (k - 1) * np.exp(-2.0 * k**2 * lam**2)))


def test_exact_stretched_exp():
    n = np.arange(1, 200)
    g, k, fit = stretched_exp_fit((n, np.exp(-2.0 * n**0.5)))
    assert g == pytest.approx(0.5, abs=1e-6) and k == pytest.approx(2.0, abs=1e-6)
    g, k, fit = stretched_exp_fit(TailCurve(n[:60], 2.0 ** -n[:60], np.zeros(60)))
    assert g == pytest.approx(1.0, abs=1e-6) and k == pytest.approx(math.log(2), abs=1e-6)
    assert fit.transform == "loglog_neglog" and fit.n_points == 60


def test_noisy_stretched_exp():
    n = np.arange(10, 400)
    noise = 1.0 + 0.01 * normals(5, n.size)
    g, _, fit = stretched_exp_fit((n, np.exp(-1.5 * n**0.4) * noise))
    assert abs(g - 0.4) < 0.05 and fit.r2 > 0.99


def test_fit_filters_and_errors():
    n = np.arange(1, 8)
    p = np.array([1.0, 0.5, 0.3, 0.2, 0.1, 0.0, 0.05])
    with pytest.warns(UserWarning):
        g, _, fit = stretched_exp_fit((n, p))
    assert fit.n_points == 5
    with pytest.raises(DataError), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        stretched_exp_fit((n, np.r_[np.zeros(5), 0.5, 0.5]))
    with pytest.raises(DataError):
        linear_fit([1, 2], [3, 4])
    with pytest.raises(DataError):
        linear_fit([1, 1, 1], [3, 4, 5])


def test_range_restriction():
    n = np.arange(1, 100)
    p = np.where(n < 30, np.exp(-n), np.exp(-3.0 * n**0.5))
    g, k, _ = stretched_exp_fit((n, p), (30, 99))
    assert g == pytest.approx(0.5, abs=1e-9) and k == pytest.approx(3.0, abs=1e-9)
    c = TailCurve(n, p, np.zeros_like(p)).restrict(30, 40)
    assert list(c.n) == list(range(30, 41))
    with pytest.raises(DomainError):
        TailCurve([1, 2], [0.5], [0.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=30))
def test_r2_in_unit_interval(ys):
    x = np.arange(len(ys), dtype=float)
    r = linear_fit(x, ys)
    assert 0.0 <= r.r2 <= 1.0


def test_fit_result_dict():
    d = linear_fit([0, 1, 2], [1, 3, 5]).to_dict()
    assert set(d) == {"slope", "intercept", "r2", "stderr_slope", "n_points", "transform"}
    assert d["slope"] == pytest.approx(2.0)


def test_ks_calibration():
    ok = sum(ks_normal_test(normals(seed_stream(3, r), 10_000), 0.0, 1.0)[1] > 0.01
             for r in range(200))
    assert ok >= 0.98 * 200


def test_ks_rejects_constant():
    d, p = ks_normal_test(np.zeros(100), 0.0, 1.0)
    assert d == pytest.approx(0.5) and p < 1e-6
    with pytest.raises(DomainError):
        ks_normal_test(np.zeros(100), 0.0, 0.0)
    with pytest.raises(DataError):
        ks_normal_test(np.zeros(10), 0.0, 1.0)


def test_ks_pvalue_series():
    for r, n in enumerate((50, 300, 5000)):
        x = normals(seed_stream(4, r), n) * 1.1 + 0.05
        d, p = ks_normal_test(x, 0.0, 1.0)
        assert 0.0 <= d <= 1.0
        assert p == pytest.approx(kolmogorov_sf(d * math.sqrt(n)), abs=1e-10)


@given(st.floats(-50, 50), st.floats(0.01, 100))
def test_ks_affine_invariance(mu, sigma):
    z = normals(9, 200)
    a = ks_normal_test(z, 0.0, 1.0)
    b = ks_normal_test(mu + sigma * z, mu, sigma)
    assert a[0] == pytest.approx(b[0], abs=1e-9)
    assert a[1] == pytest.approx(b[1], abs=1e-8)


def test_lil_zero_and_errors():
    assert lil_ratio(np.zeros(101), 1.0, 100) == 0.0
    with pytest.raises(DomainError):
        lil_ratio(np.zeros(101), 0.0, 100)
    with pytest.raises(DomainError):
        lil_ratio(np.zeros(101), 1.0, 10)
    with pytest.raises(DataError):
        lil_ratio(np.zeros(50), 1.0, 100)


@given(st.floats(0.01, 100), st.integers(0, 2**32))
def test_lil_homogeneity(a, seed):
    S = np.concatenate([[0.0], np.cumsum(normals(seed, 500))])
    assert lil_ratio(a * S, 2.0 * a * a, 500) == pytest.approx(lil_ratio(S, 2.0, 500), rel=1e-12)


def test_lil_iid_calibration():
    n = 3**12
    c2 = 2.0
    vals = [lil_ratio(np.concatenate([[0.0], np.cumsum(math.sqrt(c2) * normals(seed_stream(6, r), n))]),
                      c2, n) for r in range(100)]
    assert 0.5 <= np.median(vals) <= 1.5


def test_replica_mean():
    m, se = replica_mean([1.0, 2.0, 3.0, 4.0])
    assert m == 2.5 and se == pytest.approx(math.sqrt(5 / 3 / 4))
    with pytest.raises(DataError):
        replica_mean([1.0])


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40), st.randoms())
def test_replica_mean_order_free(v, rnd):
    w = list(v)
    rnd.shuffle(w)
    assert replica_mean(v)[0] == replica_mean(w)[0]
