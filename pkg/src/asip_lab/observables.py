"""Observables, Birkhoff sums, windowed conditional expectations, covariances and c^2.

Tower observables have the form

    psi(g_0, g_1, ...) = sum_j theta^{N_j} rho(g_j),   N_j = #{1 <= i <= j : g_i in S_0}.

Grouping the terms by excursion gives ``psi = suf(g_0) + sum_{i>=1} theta^i A(w_i)``
where ``suf(w, l) = sum_{i>=l} rho(w, i)``, ``A(w) = suf(w, 0)`` and ``w_i`` is
the letter picked at the i-th regeneration.  Since the ``w_i`` are iid with
law pA, ``E[psi | g_0 = s] = suf(s) + theta V0`` with ``V0 = E[A] / (1 - theta)``.
Every conditional expectation below reduces to these closed forms.

With ``rho_only=True`` the observable is just ``rho(g_0)`` (the theta = 0
convention).

The doubling map x -> 2x mod 1 is represented through its binary digits:
``x_k = sum_{i>=1} b_{k+i} 2^-i`` with iid fair bits b.  Iterating the map in
floating point would collapse every orbit to 0 after about 53 steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import signal
from scipy.special import ndtri

from . import _kernels as K
from .errors import DataError, DomainError
from .interval_maps import MapParams, apply_map
from .rng import key_of, uniforms
from .stat_fit import linear_fit
from .tower import TowerSpec, Trajectory, simulate, transition_matrix


# ---------------------------------------------------------------- observables


class TowerObservable:
    """The family psi_{theta, rho} on a finite tower, centred exactly."""

    kind = "tower_observable"

    def __init__(self, spec: TowerSpec, rho, theta: float, rho_only: bool = False,
                 tol: float = 1e-10):
        rho = np.asarray(rho, dtype=float)
        if rho.shape != (spec.n_states,):
            raise DomainError(f"rho must have one value per state ({spec.n_states})")
        if not np.all(np.isfinite(rho)):
            raise DomainError("rho must be finite")
        if rho_only:
            theta = 0.0
        elif not 0.0 < theta < 1.0:
            raise DomainError("theta must lie in ]0, 1[")
        self.spec = spec
        self.rho = rho
        self.theta = float(theta)
        self.rho_only = rho_only
        self.rho_sup = float(np.max(np.abs(rho))) if rho.size else 0.0
        st_l, off = spec.state_letter, spec.offsets
        if rho_only:
            self.suf = rho.copy()
            self.A = np.zeros(spec.n_letters)
            self.V0 = 0.0
            self.v = rho.copy()
            self.center = math.fsum(spec.nu * rho)
            self.sup_norm = max(rho.max() - self.center, self.center - rho.min())
            self.J_trunc = 1
            self.residual_bound = 0.0
            return
        # suffix sums within each letter column
        csum = np.cumsum(rho[::-1])[::-1]
        end = np.empty(spec.n_states)
        nxt = off + spec.h  # first index of the next letter
        end_val = np.append(csum, 0.0)[nxt]
        end[:] = end_val[st_l]
        self.suf = csum - end
        self.A = self.suf[off]
        self.V0 = math.fsum(spec.pA * self.A) / (1.0 - self.theta)
        self.v = self.suf + self.theta * self.V0
        self.center = math.fsum(spec.nu * self.v)
        self.sup_norm = self._sup_bound()
        # depth at which the expected number of regenerations makes the tail negligible
        if self.rho_sup == 0.0:
            self.J_trunc = 1
        else:
            visits = math.log(tol * (1.0 - self.theta) / self.rho_sup) / math.log(self.theta)
            self.J_trunc = max(1, int(math.ceil(spec.E_h * max(visits, 0.0))))
        self.residual_bound = self.rho_sup * self.theta ** (self.J_trunc / spec.E_h) / (1.0 - self.theta)

    def _sup_bound(self):
        # bounds for every partial sum psi can produce, truncated or not
        spec, rho = self.spec, self.rho
        smax = np.empty(spec.n_states)
        smin = np.empty(spec.n_states)
        pmax = np.empty(spec.n_letters)
        pmin = np.empty(spec.n_letters)
        for w in range(spec.n_letters):
            col = rho[spec.offsets[w]: spec.offsets[w] + spec.h[w]]
            pre = np.concatenate([[0.0], np.cumsum(col)])
            pmax[w], pmin[w] = pre.max(), pre.min()
            # partial sums starting at level l: pre[t] - pre[l] for t >= l
            run_max = np.maximum.accumulate(pre[::-1])[::-1]
            run_min = np.minimum.accumulate(pre[::-1])[::-1]
            smax[spec.offsets[w]: spec.offsets[w] + spec.h[w]] = run_max[:-1] - pre[:-1]
            smin[spec.offsets[w]: spec.offsets[w] + spec.h[w]] = run_min[:-1] - pre[:-1]
        g = self.theta / (1.0 - self.theta)
        sup = smax.max() + g * max(0.0, pmax.max())
        inf = smin.min() + g * min(0.0, pmin.min())
        return float(max(sup - self.center, self.center - inf))

    @classmethod
    def parity(cls, spec: TowerSpec, theta: float, rho_only: bool = False):
        """rho = +1 / -1 on level 0 by parity of the letter label, 0 elsewhere."""
        lab = np.array([int(a) if isinstance(a, (int, np.integer)) else i
                        for i, a in enumerate(spec.labels)])
        sign = np.where(lab % 2 == 0, 1.0, -1.0)
        rho = np.where(spec.state_level == 0, sign[spec.state_letter], 0.0)
        return cls(spec, rho, theta, rho_only=rho_only)

    def value_function(self):
        """E[psi | g_0 = s] by a sparse linear solve (independent of the closed form)."""
        from scipy.sparse import diags, identity
        from scipy.sparse.linalg import spsolve

        spec = self.spec
        if self.rho_only:
            return self.rho.copy()
        P = transition_matrix(spec)
        D = diags(np.where(spec.state_level == 0, self.theta, 1.0))
        return spsolve((identity(spec.n_states) - P @ D).tocsc(), self.rho)

    def describe(self):
        return {
            "kind": self.kind,
            "theta": self.theta,
            "rho_only": self.rho_only,
            "rho_sup": self.rho_sup,
            "center": self.center,
            "center_stderr": 0.0,
            "sup_norm": self.sup_norm,
            "J_trunc": self.J_trunc,
            "residual_bound": self.residual_bound,
        }


@dataclass
class MapObservable:
    """A function of the point, centred by a known constant."""

    phi: object
    center: float
    sup_norm: float
    holder_exponent: float = 1.0
    name: str = "custom"
    kind: str = "map_observable"

    def __call__(self, x):
        return self.phi(np.asarray(x, dtype=float)) - self.center

    def describe(self):
        return {"kind": self.kind, "name": self.name, "center": self.center,
                "sup_norm": self.sup_norm, "holder_exponent": self.holder_exponent}


def centered_identity() -> MapObservable:
    """phi(x) = x - 1/2."""
    return MapObservable(lambda x: x, 0.5, 0.5, 1.0, "x_minus_half")


def doubling_coboundary() -> MapObservable:
    """phi = xi - xi o f with xi(x) = x and f the doubling map, i.e. 1[x >= 1/2] - x."""
    return MapObservable(lambda x: (x >= 0.5).astype(float) - x, 0.0, 1.0, 1.0, "coboundary")


# ------------------------------------------------------------------- series


class TowerSeries:
    """X_k, X_{l,k} and the two-sided windowed values along one tower trajectory."""

    def __init__(self, obs: TowerObservable, traj: Trajectory):
        self.obs = obs
        self.traj = traj
        self.spec = obs.spec
        self.sup_norm = obs.sup_norm
        self._plain = None
        self._old = {}

    @classmethod
    def simulate(cls, obs: TowerObservable, n: int, seed, m_max: int = 0):
        """Trajectory long enough for X_0..X_{n-1} and windows up to m_max."""
        extra = max(obs.J_trunc, m_max + 1)
        return cls(obs, simulate(obs.spec, n + extra, seed))

    def __len__(self):
        return len(self.traj)

    def _check(self, ks, lo_margin, hi_margin):
        ks = np.asarray(ks, dtype=np.int64)
        if ks.size and (ks.min() < lo_margin or ks.max() + hi_margin >= len(self.traj)):
            raise IndexError(f"window [{ks.min() - lo_margin}, {ks.max() + hi_margin}] "
                             f"exceeds trajectory of length {len(self.traj)}")
        return ks

    def plain(self, ks):
        """X_k = psi(g_k, g_{k+1}, ...) - center, truncated after J_trunc terms."""
        o, tr = self.obs, self.traj
        if o.rho_only:
            ks = self._check(ks, 0, 0)
            return o.rho[tr.state_index()[ks]] - o.center
        J = o.J_trunc
        ks = self._check(ks, 0, J)
        if self._plain is None:
            fresh = tr.level == 0
            y = np.empty(len(tr))
            K.backward_sums(o.rho[tr.state_index()], fresh, o.theta, y)
            C = np.cumsum(fresh.astype(np.int64))
            self._plain = (y, C)
        y, C = self._plain
        return y[ks] - o.theta ** (C[ks + J] - C[ks]).astype(float) * y[ks + J] - o.center

    def future(self, m: int, ks):
        """Future-window value: psi with the path after k+m regenerated independently."""
        o, tr, sp = self.obs, self.traj, self.spec
        ks = self._check(ks, 0, m + 1)
        out = np.empty(ks.size)
        K.future_window(ks, int(m), tr.letter, tr.level, tr.innov, sp.h, sp.offsets,
                        o.suf, o.A, o.theta, o.V0, o.center, out)
        return out

    def _old_tables(self, m):
        if m in self._old:
            return self._old[m]
        o, sp = self.obs, self.spec
        wgt = sp.pA / sp.E_h
        top0 = np.array([sp.height_tail(d) for d in range(m + 1)]) / sp.E_h
        old_w = np.zeros(m)
        old_s = np.zeros(m)
        old_tail = 0.0
        for w in range(sp.n_letters):
            hw = int(sp.h[w])
            base = sp.offsets[w]
            # levels at time k reachable from a start at k-m-1 without a top in between
            for L in range(m + 1, hw):
                r = hw - 1 - L
                if r < m:
                    old_w[r] += wgt[w]
                    old_s[r] += wgt[w] * o.suf[base + L]
                else:
                    old_tail += wgt[w] * (o.suf[base + L] + o.theta * o.V0 - o.center)
        tabs = (top0, old_w, old_s, old_tail)
        self._old[m] = tabs
        return tabs

    def two_sided(self, m: int, ks):
        """Two-sided value: the future window averaged over g_{k-m-1} ~ nu.

        Conditioning on e_{k-m}, ..., e_{k+m} leaves only the state just
        before the window random, and that state is nu-distributed and
        independent of the window.
        """
        o, tr, sp = self.obs, self.traj, self.spec
        ks = self._check(ks, m + 1, m + 1)
        top0, old_w, old_s, old_tail = self._old_tables(int(m))
        out = np.empty(ks.size)
        K.two_sided_window(ks, int(m), tr.innov, sp.h, sp.offsets, o.suf, o.A, o.theta,
                           o.V0, o.center, top0, old_w, old_s, float(old_tail), out)
        return out


class DigitSeries:
    """Orbit of the doubling map built from iid bits; X_k = phi(x_k)."""

    def __init__(self, obs: MapObservable, n: int, seed, n_quad: int = 8):
        key = key_of(seed)
        self.obs = obs
        self.sup_norm = obs.sup_norm
        self.key = key
        # bits b_1..b_n from counters 1..n, x_n uniform from counter 0
        b = (uniforms(key, np.arange(1, n + 1, dtype=np.uint64)) < 0.5).astype(float)
        x_end = float(uniforms(key, 0))
        # x_k = (b_{k+1} + x_{k+1}) / 2, run backwards
        rev, _ = signal.lfilter([0.5], [1.0, -0.5], b[::-1], zi=[0.5 * x_end])
        self.x = np.append(rev[::-1], x_end)
        self.bits = np.append(0.0, b)
        self.gl_nodes, self.gl_weights = np.polynomial.legendre.leggauss(n_quad)

    def __len__(self):
        return self.x.size

    def plain(self, ks):
        ks = np.asarray(ks, dtype=np.int64)
        if ks.size and ks.max() >= self.x.size:
            raise IndexError("index beyond the simulated orbit")
        return self.obs(self.x[ks])

    def future(self, m: int, ks):
        """E[phi(x_k) | b_{k+1}, ..., b_{k+m}] by Gauss-Legendre on the dyadic cell."""
        ks = np.asarray(ks, dtype=np.int64)
        if ks.size and ks.max() + m >= self.x.size:
            raise IndexError("window beyond the simulated orbit")
        w = 2.0 ** (-m)
        a = self.x[ks] - w * self.x[ks + m]
        pts = a[:, None] + w * 0.5 * (self.gl_nodes[None, :] + 1.0)
        return self.obs(pts) @ (0.5 * self.gl_weights)

    def two_sided(self, m: int, ks):
        # past digits carry no information about x_k
        ks = np.asarray(ks, dtype=np.int64)
        if ks.size and ks.min() < m + 1:
            raise IndexError("two-sided window needs k >= m + 1")
        return self.future(m, ks)


class ConstantSeries:
    """Stub provider returning the same value everywhere."""

    def __init__(self, value: float = 1.0, n: int | None = None):
        self.value = float(value)
        self.sup_norm = abs(self.value)
        self.n = n

    def _fill(self, ks):
        return np.full(np.asarray(ks).shape, self.value)

    def plain(self, ks):
        return self._fill(ks)

    def future(self, m, ks):
        return self._fill(ks)

    def two_sided(self, m, ks):
        return self._fill(ks)


class IIDGaussianSeries:
    """X_k iid N(0, 1); every window returns X_k itself."""

    def __init__(self, seed, n: int):
        self.key = key_of(seed)
        self.X = ndtri(uniforms(self.key, np.arange(n + 1, dtype=np.uint64)).clip(1e-300))
        self.sup_norm = float(np.abs(self.X).max())

    def plain(self, ks):
        return self.X[np.asarray(ks)]

    def future(self, m, ks):
        return self.plain(ks)

    def two_sided(self, m, ks):
        return self.plain(ks)


# ---------------------------------------------------------------- Birkhoff sums


@dataclass
class SeriesSample:
    X: np.ndarray
    S: np.ndarray
    provenance: dict = field(default_factory=dict)


def _sample(X, provenance):
    S = np.concatenate([[0.0], np.cumsum(X)])
    return SeriesSample(np.asarray(X, dtype=float), S, provenance)


def birkhoff_series(system, obs, n: int, seed_or_x0) -> SeriesSample:
    """X_0..X_{n-1} and partial sums S_k = sum_{j<k} X_j.

    Map systems: a float ``seed_or_x0`` in ]0, 1] starts a direct orbit of f;
    otherwise the argument is a seed and, for gamma = 1, the orbit comes from
    the digit representation.  Tower systems: the argument is a seed.
    """
    if n < 0:
        raise DomainError("n must be >= 0")
    if isinstance(system, MapParams):
        if not isinstance(obs, MapObservable):
            raise TypeError("map systems need a MapObservable")
        if isinstance(seed_or_x0, float):
            x = np.empty(n)
            cur = seed_or_x0
            for k in range(n):
                x[k] = cur
                cur = apply_map(system, cur)
            return _sample(obs(x), {"system": f"map(gamma={system.gamma!r})", "x0": seed_or_x0})
        if system.gamma != 1.0:
            raise DomainError("seeded map orbits are only available for gamma = 1")
        ds = DigitSeries(obs, n, seed_or_x0)
        return _sample(ds.plain(np.arange(n)), {"system": "doubling_digits",
                                                "seed": key_of(seed_or_x0)})
    if isinstance(system, TowerSpec):
        if not isinstance(obs, TowerObservable):
            raise TypeError("tower systems need a TowerObservable")
        ts = TowerSeries.simulate(obs, n, seed_or_x0)
        return _sample(ts.plain(np.arange(n)), {"system": system.source,
                                                "seed": key_of(seed_or_x0)})
    raise TypeError(f"unsupported system {type(system).__name__}")


def windowed_x(spec, obs, traj, m: int, k: int, mode: str = "two_sided") -> float:
    """One windowed value X_{l,k} (``future_only``) or its two-sided average."""
    series = TowerSeries(obs, traj)
    if mode == "future_only":
        return float(series.future(m, [k])[0])
    if mode == "two_sided":
        return float(series.two_sided(m, [k])[0])
    raise DomainError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------- covariances


def _fsum_rows(a):
    return np.array([math.fsum(r) for r in a])


def _fmean(a):
    a = np.asarray(a, dtype=float).ravel()
    return math.fsum(a) / a.size


@dataclass
class CovarianceCurve:
    lag: np.ndarray
    cov: np.ndarray
    stderr: np.ndarray
    method: str
    per_replica: np.ndarray | None = None  # (replicas, lags) when available

    def rows(self):
        return [(int(a), float(b), float(c)) for a, b, c in zip(self.lag, self.cov, self.stderr)]


def covariance(samples, max_lag: int, method: str = "replicas", batches: int = 20,
               mean=None) -> CovarianceCurve:
    """Stationary covariances at lags 0..max_lag with standard errors.

    ``replicas``: ``samples`` is (R, n), one stationary stretch per row; each
    row yields its own estimate and the spread across rows gives the error.
    ``overlap``: ``samples`` is one long series; products at each lag are
    averaged and the error comes from batch means.  Pass ``mean`` when the
    centre is known exactly.
    """
    x = np.asarray(samples, dtype=float)
    if method == "replicas":
        if x.ndim != 2:
            raise DataError("replica method needs a 2-d array (replicas, length)")
        R, n = x.shape
        if R < 2:
            raise DataError("need at least two replicas")
        if n <= max_lag:
            raise DataError(f"series length {n} must exceed max_lag {max_lag}")
        mu = _fmean(x) if mean is None else float(mean)
        xc = x - mu
        per = np.empty((R, max_lag + 1))
        for i in range(max_lag + 1):
            per[:, i] = np.mean(xc[:, : n - i] * xc[:, i:], axis=1)
        cov = np.array([_fmean(per[:, i]) for i in range(max_lag + 1)])
        sd = np.array([math.sqrt(math.fsum((per[:, i] - cov[i]) ** 2) / (R - 1))
                       for i in range(max_lag + 1)])
        return CovarianceCurve(np.arange(max_lag + 1), cov, sd / math.sqrt(R), method, per)
    if method == "overlap":
        x = x.ravel()
        n = x.size
        if n <= max_lag or n - max_lag < 2 * batches:
            raise DataError(f"series length {n} too short for max_lag {max_lag}")
        mu = _fmean(x) if mean is None else float(mean)
        xc = x - mu
        cov = np.empty(max_lag + 1)
        se = np.empty(max_lag + 1)
        for i in range(max_lag + 1):
            prod = xc[: n - i] * xc[i:]
            cov[i] = _fmean(prod)
            bm = np.array([_fmean(c) for c in np.array_split(prod, batches)])
            se[i] = bm.std(ddof=1) / math.sqrt(batches)
        return CovarianceCurve(np.arange(max_lag + 1), cov, se, method)
    raise DomainError(f"unknown covariance method {method!r}")


@dataclass
class C2Estimate:
    c2: float
    stderr: float
    method: str
    detail: dict = field(default_factory=dict)


def _series_cutoff(cov, se):
    """Number of lags kept: stop before the first run of three insignificant lags."""
    small = np.abs(cov) < 2.0 * se
    for i in range(1, cov.size - 2):
        if small[i] and small[i + 1] and small[i + 2]:
            return i
    return cov.size


def c2_estimate(samples, method: str = "covariance_series", max_lag: int | None = None,
                n_grid=None, mean=None) -> C2Estimate:
    """Asymptotic variance of the partial sums.

    ``samples`` is (R, n): R independent stationary stretches.

    ``covariance_series``: c_0 + 2 sum_{i>=1} c_i, summed up to the first run
    of three lags with |c_i| < 2 SE.  A geometric extrapolation of the last
    kept lags is reported as an extra uncertainty, not added to the value.

    ``normalized_second_moment``: regress the replica mean of S_n^2 / n on
    1/n over ``n_grid`` and take the intercept.  The error follows from the
    same linear combination applied replica by replica.
    """
    from .errors import ExtrapolationError

    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("c2_estimate needs a 2-d array with at least two replicas")
    R, n = x.shape
    if method == "covariance_series":
        L = min(max_lag if max_lag is not None else n // 4, n - 1)
        cc = covariance(x, L, "replicas", mean=mean)
        keep = _series_cutoff(cc.cov, cc.stderr)
        w = np.zeros(L + 1)
        w[0] = 1.0
        w[1:keep] = 2.0
        z = cc.per_replica @ w
        c2 = _fmean(z)
        se = math.sqrt(math.fsum((z - c2) ** 2) / (R - 1) / R)
        # decay ratio from the last two consecutive significant lags
        tail = 0.0
        sig = np.abs(cc.cov) >= 2.0 * cc.stderr
        for i in range(keep - 1, 1, -1):
            if sig[i] and sig[i - 1]:
                a, b = abs(cc.cov[i - 1]), abs(cc.cov[i])
                q = min(b / a, 0.9)
                tail = 2.0 * b * q / (1.0 - q)
                break
        return C2Estimate(c2, math.sqrt(se**2 + tail**2), method,
                          {"lags_used": int(keep), "tail_uncertainty": tail, "sampling_stderr": se})
    if method == "normalized_second_moment":
        mu = _fmean(x) if mean is None else float(mean)
        S = np.cumsum(x - mu, axis=1)
        if n_grid is None:
            n_grid = np.unique(np.geomspace(max(4, n // 16), n, 6).astype(int))
        grid = np.asarray(n_grid, dtype=int)
        if grid.size < 3 or grid.max() > n:
            raise DataError("n_grid needs at least 3 horizons within the sample length")
        Y = S[:, grid - 1] ** 2 / grid  # (R, G)
        ybar = np.array([_fmean(Y[:, g]) for g in range(grid.size)])
        yse = Y.std(axis=0, ddof=1) / math.sqrt(R)
        X = np.column_stack([np.ones(grid.size), 1.0 / grid])
        coef, *_ = np.linalg.lstsq(X, ybar, rcond=None)
        weights = np.linalg.pinv(X)[0]  # intercept as a linear functional of ybar
        z = Y @ weights
        c2 = float(coef[0])
        se = math.sqrt(math.fsum((z - _fmean(z)) ** 2) / (R - 1) / R)
        resid = ybar - X @ coef
        curve = {"n": grid.tolist(), "mean_Sn2_over_n": ybar.tolist(), "stderr": yse.tolist()}
        scale = np.maximum(yse, 1e-12 * max(1.0, abs(c2)))
        if not np.isfinite(c2) or np.max(np.abs(resid) / scale) > 5.0:
            raise ExtrapolationError("E(S_n^2)/n does not follow a + b/n on the grid", curve)
        return C2Estimate(c2, se, method, {"n_grid": grid.tolist(), "curve": curve,
                                           "slope": float(coef[1])})
    raise DomainError(f"unknown c2 method {method!r}")


def tail_slope(curve_n, curve_v):
    """log(-log v) against log n; used for the windowing error decay."""
    n = np.asarray(curve_n, dtype=float)
    v = np.asarray(curve_v, dtype=float)
    ok = (v > 0) & (v < 1) & (n > 0)
    return linear_fit(np.log(n[ok]), np.log(-np.log(v[ok])), "loglog_neglog")
