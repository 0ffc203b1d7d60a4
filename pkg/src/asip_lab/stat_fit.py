"""Regression fits for tail curves, a one-sample KS test and an LIL diagnostic."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .errors import DataError, DomainError


@dataclass
class FitResult:
    slope: float
    intercept: float
    r2: float
    stderr_slope: float
    n_points: int
    transform: str

    def to_dict(self):
        return asdict(self)


@dataclass
class TailCurve:
    """Tail probabilities P(T >= n) with standard errors (zero when exact)."""

    n: np.ndarray
    p: np.ndarray
    stderr: np.ndarray

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        if not (self.n.shape == self.p.shape == self.stderr.shape):
            raise DomainError("n, p and stderr must have the same length")

    def rows(self):
        return [(int(a), float(b), float(c)) for a, b, c in zip(self.n, self.p, self.stderr)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "p", "stderr"])
            for a, b, c in self.rows():
                w.writerow([a, repr(b), repr(c)])

    def restrict(self, lo, hi):
        m = (self.n >= lo) & (self.n <= hi)
        return TailCurve(self.n[m], self.p[m], self.stderr[m])


def linear_fit(x, y, transform="linear") -> FitResult:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise DataError(f"need at least 3 points, got {x.size}")
    if np.ptp(x) == 0:
        raise DataError("all abscissae are equal")
    res = stats.linregress(x, y)
    r2 = min(max(res.rvalue**2, 0.0), 1.0) if np.isfinite(res.rvalue) else 1.0
    return FitResult(float(res.slope), float(res.intercept), float(r2), float(res.stderr), int(x.size), transform)


def stretched_exp_fit(curve, n_range=None):
    """Fit ``log(-log p) = log kappa + gamma log n``.

    ``curve`` is a TailCurve or an ``(n, p)`` pair.  Points with p outside
    ]0, 1[ carry no information in these coordinates and are dropped with a
    warning.  Returns ``(gamma_hat, kappa_hat, FitResult)``.
    """
    if isinstance(curve, TailCurve):
        n, p = curve.n.astype(float), curve.p
    else:
        n, p = (np.asarray(a, dtype=float) for a in curve)
    if n_range is not None:
        m = (n >= n_range[0]) & (n <= n_range[1])
        n, p = n[m], p[m]
    ok = (p > 0.0) & (p < 1.0) & (n > 0)
    if not np.all(ok):
        warnings.warn(f"stretched_exp_fit: dropped {int((~ok).sum())} points with p outside ]0,1[")
        n, p = n[ok], p[ok]
    if n.size < 3:
        raise DataError(f"stretched_exp_fit needs 3 usable points, got {n.size}")
    fit = linear_fit(np.log(n), np.log(-np.log(p)), "loglog_neglog")
    return fit.slope, math.exp(fit.intercept), fit


def ks_normal_test(samples, mu: float, sigma: float):
    """One-sample KS test against N(mu, sigma^2) with the asymptotic p-value."""
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma!r}")
    x = np.asarray(samples, dtype=float)
    if x.size < 50:
        raise DataError(f"ks_normal_test needs >= 50 samples, got {x.size}")
    res = stats.kstest(x, "norm", args=(mu, sigma), method="asymp")
    return float(res.statistic), float(res.pvalue)


def lil_ratio(S, c2: float, n: int) -> float:
    """max over 16 <= k <= n of |S_k| / sqrt(2 c2 k log log k).

    ``S[k]`` holds S_k, so ``S[0]`` is the empty sum.
    """
    if not c2 > 0:
        raise DomainError(f"c2 must be > 0, got {c2!r}")
    if n < 16:
        raise DomainError("lil_ratio needs n >= 16")
    S = np.asarray(S, dtype=float)
    if S.size <= n:
        raise DataError(f"partial-sum series has {S.size} entries, needs {n + 1}")
    k = np.arange(16, n + 1, dtype=float)
    return float(np.max(np.abs(S[16 : n + 1]) / np.sqrt(2.0 * c2 * k * np.log(np.log(k)))))


def replica_mean(values):
    """Mean and standard error over replicas, independent of their order."""
    v = [float(a) for a in np.asarray(values, dtype=float).ravel()]
    r = len(v)
    if r < 2:
        raise DataError("need at least two replicas")
    mean = math.fsum(v) / r
    var = math.fsum((a - mean) ** 2 for a in v) / (r - 1)
    return mean, math.sqrt(var / r)
