"""Compiled inner loops.

The generator here must agree bit for bit with ``rng.uniforms``; the tests
compare the two directly.
"""

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, nogil=True)
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, nogil=True)
def uniform(key, counter):
    x = mix64(key + (np.uint64(counter) + _ONE) * _GOLDEN)
    return np.float64(x >> _S11) * _INV53


@njit(cache=True, nogil=True)
def search(cdf, u):
    # first index i with cdf[i] > u
    lo = 0
    hi = cdf.size - 1
    while lo < hi:
        mid = (lo + hi) >> 1
        if cdf[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True, nogil=True)
def evolve(h, letter0, level0, innov, letters, levels):
    """Fill ``letters``/``levels`` (length n+1) from g_0 and innovations 1..n."""
    letters[0] = letter0
    levels[0] = level0
    w = letter0
    lv = level0
    for k in range(1, letters.size):
        if lv < h[w] - 1:
            lv += 1
        else:
            w = innov[k]
            lv = 0
        letters[k] = w
        levels[k] = lv


@njit(cache=True, nogil=True)
def meeting_times(keys, pkeys, h, cdf, nu_cdf, st_letter, st_level, n_max, t_out):
    """Meeting time of coupled pairs sharing innovations.

    ``t_out[r] = n_max + 1`` when the pair has not met by ``n_max``.  After
    meeting the two copies keep running to ``n_max``; any later
    disagreement is counted and returned.
    """
    bad = 0
    for r in range(keys.size):
        key = keys[r]
        s = search(nu_cdf, uniform(key, 0))
        t = search(nu_cdf, uniform(pkeys[r], 0))
        wa, la = st_letter[s], st_level[s]
        wb, lb = st_letter[t], st_level[t]
        met = n_max + 1
        if wa == wb and la == lb:
            met = 0
        for k in range(1, n_max + 1):
            top_a = la == h[wa] - 1
            top_b = lb == h[wb] - 1
            if top_a or top_b:
                e = search(cdf, uniform(key, k))
                if top_a:
                    wa = e
                    la = 0
                else:
                    la += 1
                if top_b:
                    wb = e
                    lb = 0
                else:
                    lb += 1
            else:
                la += 1
                lb += 1
            same = wa == wb and la == lb
            if met <= n_max:
                if not same:
                    bad += 1
            elif same:
                met = k
        t_out[r] = met
    return bad


@njit(cache=True, nogil=True)
def theta_s_sums(keys, h, cdf, nu_cdf, st_letter, st_level, theta, ell_max, acc, acc2):
    """Accumulate theta^{s_l} and its square for l = 0..ell_max over replicas.

    s_l counts visits to level 0 among g_0..g_l.
    """
    for r in range(keys.size):
        key = keys[r]
        s = search(nu_cdf, uniform(key, 0))
        w, lv = st_letter[s], st_level[s]
        v = theta if lv == 0 else 1.0
        acc[0] += v
        acc2[0] += v * v
        for k in range(1, ell_max + 1):
            if lv < h[w] - 1:
                lv += 1
            else:
                w = search(cdf, uniform(key, k))
                lv = 0
                v *= theta
            acc[k] += v
            acc2[k] += v * v


@njit(cache=True, nogil=True)
def _phi_window(k, m, innov, h, A, theta, V0, phi):
    # phi[t - k] for t in (k, k+m+1]: value from a fresh regeneration at t,
    # with the conditional mean V0 standing in after the window end
    E1 = k + m + 1
    phi[m + 1] = V0
    for t in range(k + m, k, -1):
        e = innov[t]
        nxt = t + h[e]
        if nxt > E1:
            nxt = E1
        phi[t - k] = A[e] + theta * phi[nxt - k]


@njit(cache=True, nogil=True)
def future_window(ks, m, letter, level, innov, h, offsets, suf, A, theta, V0, center, out):
    phi = np.empty(m + 2)
    for i in range(ks.size):
        k = ks[i]
        _phi_window(k, m, innov, h, A, theta, V0, phi)
        w = letter[k]
        lv = level[k]
        nxt = k + h[w] - lv
        if nxt > k + m + 1:
            nxt = k + m + 1
        out[i] = suf[offsets[w] + lv] + theta * phi[nxt - k] - center


@njit(cache=True, nogil=True)
def two_sided_window(ks, m, innov, h, offsets, suf, A, theta, V0, center,
                     top0, old_w, old_s, old_tail, out):
    """Average of the future window over g_{k-m-1} ~ nu, innovations fixed.

    top0[d] = P(h > d) / E_h is the chance that the state at time k-m-1
    first reaches the top d steps later.  old_w, old_s and old_tail collect
    the starting states that are still in their first excursion at time k.
    """
    phi = np.empty(m + 2)
    ptop = np.empty(m + 1)
    for i in range(ks.size):
        k = ks[i]
        t0 = k - m - 1
        _phi_window(k, m, innov, h, A, theta, V0, phi)
        for d in range(m + 1):
            ptop[d] = top0[d]
        for s in range(t0 + 1, k):
            tgt = s + h[innov[s]] - 1
            if tgt <= k - 1:
                ptop[tgt - t0] += ptop[s - 1 - t0]
        acc = old_tail
        for r in range(m):
            acc += old_s[r] + old_w[r] * (theta * phi[r + 1] - center)
        for s in range(t0 + 1, k + 1):
            e = innov[s]
            lv = k - s
            if lv < h[e]:
                nxt = s + h[e]
                if nxt > k + m + 1:
                    nxt = k + m + 1
                acc += ptop[s - 1 - t0] * (suf[offsets[e] + lv] + theta * phi[nxt - k] - center)
        out[i] = acc


@njit(cache=True, nogil=True)
def backward_sums(rho_path, fresh, theta, y):
    """y[t] = rho_path[t] + theta^{fresh[t+1]} y[t+1], y past the end = 0."""
    n = rho_path.size
    acc = 0.0
    for t in range(n - 1, -1, -1):
        if t + 1 < n and fresh[t + 1]:
            acc *= theta
        acc = rho_path[t] + acc
        y[t] = acc
