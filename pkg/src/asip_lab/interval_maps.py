"""Intermittent interval maps with stretched-exponential return tails.

The family is

    f(x) = x (1 + c / |log x|^beta)   for 0 < x <= 1/2
    f(x) = 2x - 1                     for 1/2 < x <= 1

with ``beta = 1/gamma - 1`` and ``c = (log 2)^beta`` so that f(1/2) = 1.
The base set is Y = ]1/2, 1] and the first-return map to Y is the induced
map F.

Everything that iterates the left inverse branch works with
``u = -log x``.  Inverse-branch orbits of 1 shrink like exp(-n^gamma), so
in x-coordinates they underflow long before the tails get interesting.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CappedReturnError, DomainError, NumericError
from .rng import Stream

LOG2 = math.log(2.0)
_RTOL = 1e-12
_MAX_ITER = 200


@dataclass(frozen=True)
class MapParams:
    gamma: float
    beta: float
    c: float


def make_map(gamma: float) -> MapParams:
    gamma = float(gamma)
    if not (0.0 < gamma <= 1.0) or math.isnan(gamma):
        raise DomainError(f"gamma must lie in ]0, 1], got {gamma!r}")
    beta = 1.0 / gamma - 1.0
    return MapParams(gamma, beta, LOG2**beta)


def apply_map(p: MapParams, x):
    """One step of f.  Works on scalars and arrays."""
    xa = np.asarray(x, dtype=float)
    if np.any(~((xa > 0.0) & (xa <= 1.0))):
        raise DomainError("apply_map needs x in ]0, 1]")
    left = xa <= 0.5
    u = -np.log(np.where(left, xa, 0.5))
    out = np.where(left, xa * (1.0 + p.c * u ** (-p.beta)), 2.0 * xa - 1.0)
    return float(out) if out.ndim == 0 else out


def _inc_residual(p, u, d):
    # phi(d) = d - log(1 + c (u+d)^-beta); increasing and concave in d
    v = u + d
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        q = p.c * v ** (-p.beta)
        return d - np.log1p(q), 1.0 + p.beta * q / (v * (1.0 + q))


def u_step(p: MapParams, u):
    """Advance ``u = -log z`` by one application of the left inverse branch.

    Solves ``u' - log(1 + c u'^(-beta)) = u`` for ``u' > u``.  The unknown is
    the increment ``d = u' - u``, bracketed by ``0 < d <= log(1 + c u^-beta)``.
    Newton started from the left end of the bracket converges monotonically
    because the residual is concave; bisection takes over if a step ever
    leaves the bracket.  Scalars in, scalar out; arrays are handled lane-wise.
    """
    ua = np.asarray(u, dtype=float)
    scalar = ua.ndim == 0
    ua = np.atleast_1d(ua)
    if np.any(~(ua >= 0.0)) or np.any(~np.isfinite(ua)):
        raise DomainError("u_step needs finite u >= 0")
    if p.beta == 0.0:
        out = ua + LOG2
        return float(out[0]) if scalar else out

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        hi = np.log1p(p.c * ua ** (-p.beta))
    lo = np.zeros_like(ua)
    at_zero = ~np.isfinite(hi)
    if np.any(at_zero):
        # u = 0: the bracket is unbounded above, widen it until the residual turns positive
        h = np.ones(int(at_zero.sum()))
        for _ in range(_MAX_ITER):
            r, _ = _inc_residual(p, 0.0, h)
            if np.all(r > 0):
                break
            h = np.where(r > 0, h, 2.0 * h)
        else:
            raise NumericError("u_step could not bracket the root", u=0.0, beta=p.beta)
        hi[at_zero] = h

    # the residual is concave, so Newton from the left end climbs monotonically
    d = np.where(at_zero, 0.5 * hi, 0.0)
    active = np.ones(ua.shape, dtype=bool)
    for _ in range(_MAX_ITER):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        uu, dd = ua[idx], d[idx]
        r, dr = _inc_residual(p, uu, dd)
        pos = r > 0
        hi[idx] = np.where(pos, dd, hi[idx])
        lo[idx] = np.where(pos, lo[idx], dd)
        new = dd - r / dr
        bad = ~((new >= lo[idx]) & (new <= hi[idx]))
        # near u = 0 the slope can be so steep that Newton stalls far from the root
        tol = _RTOL * new + 4.0 * np.spacing(uu + new)
        bad |= (np.abs(new - dd) <= tol) & (np.abs(r) > 1e-6)
        new = np.where(bad, 0.5 * (lo[idx] + hi[idx]), new)
        d[idx] = new
        tol = _RTOL * new + 4.0 * np.spacing(uu + new)
        done = (np.abs(new - dd) <= tol) | (r == 0.0)
        active[idx[done]] = False
    else:
        if np.any(active):
            j = int(np.nonzero(active)[0][0])
            raise NumericError(
                "u_step did not converge",
                u=float(ua[j]), iterations=_MAX_ITER, bracket=(float(lo[j]), float(hi[j])),
            )
    out = ua + d
    return float(out[0]) if scalar else out


def u_forward(p: MapParams, u):
    """Image of ``z = e^-u`` under the left branch, in u-coordinates."""
    ua = np.asarray(u, dtype=float)
    return ua - np.log1p(p.c * ua ** (-p.beta))


def log_fprime(p: MapParams, u):
    """log f'(e^-u) on the left branch."""
    ua = np.asarray(u, dtype=float)
    q = p.c * ua ** (-p.beta)
    return np.log1p(q + p.beta * q / ua)


def tail_mass(p: MapParams, x0: float, n: int):
    """Iterate ``u_step`` n times from ``-log x0``; return ``(u_n, e^-u_n)``.

    With x0 = 1, ``e^-u_n`` is the normalised Lebesgue mass of {tau > n} in Y.
    """
    if n < 0:
        raise DomainError("n must be >= 0")
    if not (0.0 < x0 <= 1.0):
        raise DomainError("x0 must lie in ]0, 1]")
    u = -math.log(x0)
    for _ in range(n):
        u = u_step(p, u)
    return u, math.exp(-u)


@dataclass
class UOrbit:
    x0: float
    u: np.ndarray

    @property
    def mass(self):
        return np.exp(-self.u)

    def bracket(self, gamma: float):
        """Constants (delta1, delta2) with delta2 n^gamma <= u_n <= delta1 n^gamma, n >= 1."""
        n = np.arange(1, self.u.size)
        if n.size == 0:
            raise DomainError("orbit too short for a bracket")
        r = self.u[1:] / n**gamma
        return float(r.max()), float(r.min())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "u_n", "mass"])
            for i, (uu, mm) in enumerate(zip(self.u, self.mass)):
                w.writerow([i, repr(float(uu)), repr(float(mm))])


def u_orbit(p: MapParams, x0: float, n: int) -> UOrbit:
    if not (0.0 < x0 <= 1.0):
        raise DomainError("x0 must lie in ]0, 1]")
    u = np.empty(n + 1)
    u[0] = -math.log(x0) + 0.0
    for k in range(n):
        u[k + 1] = u_step(p, u[k])
    return UOrbit(x0, u)


def return_time_and_F(p: MapParams, x: float, cap: int = 10**7):
    """First return time to Y and the landing point F(x)."""
    if not (0.5 < x <= 1.0):
        raise DomainError("x must lie in ]1/2, 1]")
    y = 2.0 * x - 1.0
    if y > 0.5:
        return 1, y
    u = -math.log(y)
    k = 1
    beta, cc = p.beta, p.c
    while u >= LOG2:
        if k >= cap:
            raise CappedReturnError(cap, x)
        u = u - math.log1p(cc * u ** (-beta))
        k += 1
    return k, math.exp(-u)


@dataclass(frozen=True)
class Branch:
    n: int
    x_lo: float
    x_hi: float
    u_lo: float
    u_hi: float
    length: float  # normalised so that m(Y) = 1


@dataclass
class InducingScheme:
    params: MapParams
    branches: list = field(default_factory=list)
    residual_mass: float = 0.0
    # u_n(1) for n = 0..n_max
    u_one: np.ndarray = field(default_factory=lambda: np.zeros(1))

    @property
    def n_max(self):
        return len(self.branches)

    def lengths(self):
        return np.array([b.length for b in self.branches])

    def locate(self, x: float) -> int:
        """Label of the branch containing x (0 if it lies in the residual)."""
        if not (0.5 < x <= 1.0):
            raise DomainError("x must lie in ]1/2, 1]")
        # 2x - 1 = e^-u with u_{n-1}(1) <= u < u_n(1)
        u = -math.log(2.0 * x - 1.0)
        n = int(np.searchsorted(self.u_one, u, side="right"))
        return n if n <= self.n_max else 0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "x_lo", "x_hi", "length"])
            for b in self.branches:
                w.writerow([b.n, repr(b.x_lo), repr(b.x_hi), repr(b.length)])


def branch_partition(p: MapParams, n_max: int) -> InducingScheme:
    """Branches of the first return time on Y up to label ``n_max``.

    Branch n is ``]1/2 + e^-u_n(1)/2, 1/2 + e^-u_{n-1}(1)/2]``; on it 2x - 1
    runs over z_{n-1}(Y).
    """
    if n_max < 1:
        raise DomainError("n_max must be >= 1")
    u1 = u_orbit(p, 1.0, n_max).u
    out = []
    for n in range(1, n_max + 1):
        a, b = u1[n - 1], u1[n]
        length = math.exp(-a) * -math.expm1(a - b)
        out.append(Branch(n, 0.5 + 0.5 * math.exp(-b), 0.5 + 0.5 * math.exp(-a), a, b, length))
    return InducingScheme(p, out, math.exp(-u1[n_max]), u1)


@dataclass
class GMReport:
    min_expansion: np.ndarray  # per branch label 1..n_max
    distortion_C: float
    per_n_distortion: np.ndarray  # index n-1 holds the max for z_n, n = 1..n_max
    samples_used: int

    @property
    def overall_min_expansion(self):
        return float(self.min_expansion.min())

    def max_distortion(self, n_upto: int) -> float:
        return float(self.per_n_distortion[:n_upto].max())


def verify_gm(p: MapParams, scheme: InducingScheme, pairs_per_branch: int, seed=0) -> GMReport:
    """Sample expansion and distortion of the inverse branches of F.

    The inverse of F on branch n is ``y -> (1 + z_{n-1}(y)) / 2``, so a single
    set of pairs (y, y') in Y, pushed through the left inverse branch, serves
    every branch at once.  log z_n' is accumulated by the chain rule.
    """
    if scheme.n_max < 1:
        raise DomainError("scheme has no branches")
    if pairs_per_branch < 2:
        raise DomainError("pairs_per_branch must be >= 2")
    s = Stream(seed)
    a = s.sub(0).block(0, pairs_per_branch)
    b = s.sub(1).block(0, pairs_per_branch)
    # y = 1 - U/2 lies in ]1/2, 1]
    ya, yb = 1.0 - 0.5 * a, 1.0 - 0.5 * b
    keep = ya != yb
    ya, yb = ya[keep], yb[keep]
    dy = np.abs(ya - yb)
    ua = -np.log1p(-0.5 * a[keep])
    ub = -np.log1p(-0.5 * b[keep])
    log2dy = np.log(2.0 * dy)

    n_max = scheme.n_max
    min_exp = np.empty(n_max)
    per_n = np.empty(n_max)
    dlog = np.zeros_like(ua)  # log z_k'(y_a) - log z_k'(y_b)
    for n in range(1, n_max + 1):
        # branch n uses z_{n-1}; z_0 is the identity
        lo, hi = np.minimum(ua, ub), np.maximum(ua, ub)
        log_gap = -lo + np.log(-np.expm1(lo - hi))
        min_exp[n - 1] = np.exp(np.min(log2dy - log_gap))
        ua = u_step(p, ua)
        ub = u_step(p, ub)
        dlog -= log_fprime(p, ua) - log_fprime(p, ub)
        per_n[n - 1] = np.max(np.abs(dlog) / dy)
    return GMReport(min_exp, float(per_n.max()), per_n, int(ya.size))
