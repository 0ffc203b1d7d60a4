import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asip_lab.blocks import (asip_probe, b_of, block_sums, block_variance_rate, ell0_of,
                             gap_bound_check, K0_of, level_of, m_of, q_of, schedule,
                             suggest_kappa, tau_of, windowed_terms)
from asip_lab.errors import DataError, DomainError
from asip_lab.observables import (ConstantSeries, IIDGaussianSeries, TowerObservable,
                                  TowerSeries)
from asip_lab.rng import seed_stream
from asip_lab.tower import make_tower

LOG3 = math.log(3)


def test_b_of():
    assert b_of(10) == 3 and b_of(9) == 2 and b_of(27) == 3 and b_of(2) == 1
    assert list(b_of(np.array([3, 4, 81, 82]))) == [1, 2, 4, 5]
    with pytest.raises(DomainError):
        b_of(1)


def test_schedule_examples():
    assert [m_of(e, 1.0, 2.0) for e in range(1, 6)] == [2, 4, 6, 8, 10]
    assert K0_of(1.0, 2.0) == 6
    assert q_of(8, 1.0, 2.0) == 3**6 // 16 - 2 == 43
    assert tau_of(3**9, 1.0, 2.0) == (3**9 - 3**8) // 108 - 2 == 119
    s = schedule(3**9, 1.0, 2.0)
    assert s.tau_n <= s.q[9] and s.b_n == 9 and s.K0 == 6
    # m_l = floor(l^2) for gamma = 1/2 is computed in integers
    assert m_of(7, 0.5, 1.0) == 49


def test_ell0():
    assert ell0_of(1.0, 2.0) == 3
    # 3^{l-1} >= l^2 holds at l = 1, fails at l = 2 and holds from l = 3 on
    assert ell0_of(0.5, 1.0) == 3
    assert ell0_of(1 / 3, 3.0) == 8  # 729 < 3 * 343, 2187 >= 3 * 512
    for g, k in [(1.0, 2.0), (0.5, 1.0), (1 / 3, 0.5), (0.7, 3.0)]:
        e0 = ell0_of(g, k)
        assert all(3 ** (e - 1) >= k * e ** (1 / g) for e in range(e0, 60))


params = st.tuples(st.sampled_from([1.0, 0.5, 1 / 3, 0.7]), st.floats(0.3, 4.0))


@given(st.integers(2, 3**15), params)
@settings(max_examples=150)
def test_schedule_invariants(n, p):
    g, k = p
    s = schedule(n, g, k)
    assert 3 ** (s.b_n - 1) < n <= 3**s.b_n
    for ell in range(s.K0, s.b_n + 1):
        assert s.q[ell] >= 2
        m = s.m_at(ell)
        prev_hi = None
        for j in range(1, int(s.q[ell]) + 1):
            lo, hi = s.block_range(ell, j)
            assert hi - lo == 6 * m
            assert 3 ** (ell - 1) < lo and hi - 1 <= 3**ell
            assert prev_hi is None or lo == prev_hi
            prev_hi = hi
            blo, bhi = s.bridge(ell, j)
            assert bhi - blo == 2 * m and blo < lo < bhi
    if not s.degenerate:
        assert s.tau_n <= s.q[s.b_n]
    blocks = s.blocks()
    for a, b in zip(blocks, blocks[1:]):
        assert a[3] <= b[2]
    assert all(hi - 1 <= n for _, _, _, hi in blocks)
    grid = s.grid()
    if n >= s.first_index():
        assert grid[-1] == n and np.all(np.diff(grid) > 0)
    else:
        assert grid.size == 0


def test_degenerate_schedule():
    s = schedule(100, 1.0, 2.0)
    assert s.degenerate and s.blocks() == [] and s.notes
    sums = block_sums(s, ConstantSeries(1.0))
    assert np.all(sums.s_diamond == 0.0)
    assert np.array_equal(sums.gap_exact, sums.uncovered.astype(float))


def test_kappa_warning():
    with pytest.warns(UserWarning):
        s = schedule(3**8, 1.0, 2.0, delta_hat=0.1)
    assert s.notes
    k = suggest_kappa(0.4, 0.5)
    assert 0.4 * (k / 2) ** 0.5 == pytest.approx(LOG3)


def test_schedule_errors():
    for bad in [(1, 1.0, 2.0), (10, 0.0, 2.0), (10, 1.5, 2.0), (10, 1.0, 0.0)]:
        with pytest.raises(DomainError):
            schedule(*bad)


@pytest.mark.parametrize("n", [3**8, 3**9, 3**9 + 1000, 20000])
def test_constant_stub(n):
    s = schedule(n, 1.0, 2.0)
    sums = block_sums(s, ConstantSeries(1.0))
    assert np.all(sums.B == 6 * s.m[[e for e, _ in sums.keys]])
    want = 6 * (sum(int(s.m[e] * s.q[e]) for e in range(s.K0, s.b_n))
                + int(s.m[s.b_n]) * max(s.tau_n, 0))
    assert sums.s_diamond[-1] == want
    first = s.first_index()
    assert np.array_equal(sums.s_tilde, (sums.grid - first + 1).astype(float))
    # the gap is the uncovered count times sup_norm, exactly
    assert np.array_equal(sums.gap_exact, sums.uncovered.astype(float))
    chk = gap_bound_check(s, sums, 1.0)
    assert chk["ok"] and all(r["gap"] == r["bound"] for r in chk["rows"])


@given(st.integers(3**6, 3**10), params)
@settings(max_examples=40)
def test_stub_identity_property(n, p):
    g, k = p
    s = schedule(n, g, k)
    sums = block_sums(s, ConstantSeries(2.5), with_plain=False)
    for g_, i in enumerate(sums.grid):
        covered = s.covered(int(i))
        assert sums.s_diamond[g_] == 2.5 * covered
        assert sums.uncovered[g_] == (i - s.first_index() + 1) - covered
    assert gap_bound_check(s, sums, 2.5)["ok"]


def test_sum_m_envelope():
    for b in range(1, 16):
        s = schedule(3**b, 1.0, 2.0)
        assert s.sum_m() == b * (b + 1)
    s = schedule(3**15, 1.0, 2.0)
    chk = gap_bound_check(s, block_sums(s, ConstantSeries(0.0), with_plain=False), 1.0)
    for r in chk["rows"]:
        b = b_of(r["i"])
        assert r["ratio_to_log_alpha"] * LOG3**2 <= b * (b + 1) / (b - 1) ** 2
        if r["i"] == 3**b:
            assert r["ratio_to_log_alpha"] * LOG3**2 == pytest.approx(1 + 1 / b)


def test_level_of():
    assert list(level_of([1, 2, 3, 4, 9, 10, 27, 28])) == [0, 1, 1, 2, 2, 3, 3, 4]


def tower_provider(obs, n, r):
    return TowerSeries.simulate(obs, n, seed_stream(77, r), m_max=n)


def test_gap_on_tower_data():
    spec = make_tower(synthetic=(0.5, 2.0, 200))
    obs = TowerObservable.parity(spec, 0.5)
    s = schedule(3**9, 0.5, 1.0)
    for r in range(2):
        prov = TowerSeries.simulate(obs, s.horizon_needed(), seed_stream(5, r),
                                    m_max=int(s.m[s.b_n]) + 1)
        sums = block_sums(s, prov)
        chk = gap_bound_check(s, sums, obs.sup_norm)
        assert chk["ok"]
        # the gap agrees with the difference of the partial sums up to rounding
        for row in chk["rows"]:
            assert row["gap"] == pytest.approx(row["gap_from_partial_sums"], abs=1e-8)
        xt = windowed_terms(s, prov)
        assert np.all(np.abs(xt) <= obs.sup_norm + 1e-12)


def test_block_sums_match_direct_sum():
    s = schedule(3**9, 1.0, 2.0)
    prov = IIDGaussianSeries(3, 3**9 + 50)
    sums = block_sums(s, prov)
    for (ell, j), B in zip(sums.keys, sums.B):
        lo, hi = s.block_range(ell, j)
        assert B == pytest.approx(prov.X[lo:hi].sum(), abs=1e-10)
    assert sums.block(*sums.keys[3]) == sums.B[3]


class FutureOnly:
    """Provider whose two-sided window is the future window."""

    def __init__(self, series):
        self.s = series

    def plain(self, ks):
        return self.s.plain(ks)

    def two_sided(self, m, ks):
        return self.s.future(m, ks)


def test_nu_rho_only_is_truncated_series():
    spec = make_tower(synthetic=(0.5, 2.0, 40))
    obs = TowerObservable.parity(spec, 0.0, rho_only=True)
    s = schedule(3**6, 0.5, 1.0)
    length = 500

    def make(r, n):
        return FutureOnly(TowerSeries.simulate(obs, n, seed_stream(8, r)))

    vr = block_variance_rate(s, make, [4, 5], 20, length=length)
    for a, ell in enumerate([4, 5]):
        m = s.m_at(ell)
        per = []
        for r in range(20):
            x = make(r, length + 3 * 25 + 2).plain(np.arange(m + 1, m + 1 + length))
            v = np.mean(x * x) + 2 * sum(np.mean(x[:-i] * x[i:]) for i in range(1, 2 * m + 1))
            per.append(v)
        assert vr.nu[a] == pytest.approx(np.mean(per), rel=1e-12)


def test_nu_nonnegative_and_converging():
    spec = make_tower(synthetic=(0.5, 2.0, 100))
    obs = TowerObservable.parity(spec, 0.5)
    s = schedule(3**6, 0.5, 1.0)
    vr = block_variance_rate(
        s, lambda r, n: TowerSeries.simulate(obs, n, seed_stream(9, r), m_max=40),
        [4, 5, 6], 60, length=1500)
    assert np.all(vr.nu >= -2 * vr.stderr)
    assert vr.distance[-1] < vr.distance[0]
    with pytest.raises(DomainError):
        block_variance_rate(s, None, [1], 2)


def test_nu_iid():
    s = schedule(3**6, 1.0, 1.0)
    vr = block_variance_rate(s, lambda r, n: IIDGaussianSeries(seed_stream(10, r), n),
                             [3, 5], 100, length=2000)
    assert np.all(np.abs(vr.nu - 1.0) < 4 * vr.stderr + 0.02)


def _iid_sums(n, R, master):
    s = schedule(n, 1.0, 1.0)
    return s, [block_sums(s, IIDGaussianSeries(seed_stream(master, r), n + 10)) for r in range(R)]


def test_probe_iid():
    s, sums = _iid_sums(3**10, 120, 12)
    res = asip_probe(s, sums, 1.0)
    assert res.labeled_heuristic
    assert np.all(np.diff(res.D, axis=1) >= 0)
    assert res.a <= 1.5
    assert res.a_ci[0] <= res.a <= res.a_ci[1]
    assert not res.skipped


def test_probe_guards():
    s, sums = _iid_sums(3**7, 100, 13)
    with pytest.raises(DataError):
        asip_probe(s, sums[:99], 1.0)
    with pytest.raises(DomainError):
        asip_probe(s, sums, 0.0)


def test_probe_skips_constant_blocks():
    s = schedule(3**7, 1.0, 1.0)
    sums = [block_sums(s, ConstantSeries(1.0)) for _ in range(100)]
    res = asip_probe(s, sums, 1.0)
    assert len(res.skipped) == len(sums[0].keys)
    assert all(item["note"] == "all replicas equal" for item in res.skipped)
