"""Block decomposition of the partial sums: schedule, block sums, gap bound, variance rates.

Time is cut into levels (3^{l-1}, 3^l].  Level l uses windowed terms of
half-width m_l = max(floor(kappa l^{1/gamma}), 1) and, from level K0 on, is
split into q_l blocks of 6 m_l consecutive terms

    B_{l,j} = sum of Xt_{l,k} over 3^{l-1} + 6 j m_l < k <= 3^{l-1} + 6 (j+1) m_l,

separated by nothing but sharing bridge windows
J_{l,j} = (3^{l-1} + (6j-1) m_l, 3^{l-1} + (6j+1) m_l] with their neighbours.
All schedule arithmetic is done in integers.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import ndtri

from .errors import DataError, DomainError
from .stat_fit import FitResult, linear_fit


def b_of(n):
    """Smallest b with 3^b >= n (so 3^{b-1} < n <= 3^b), vectorised."""
    na = np.asarray(n, dtype=np.int64)
    if np.any(na < 2):
        raise DomainError("n must be >= 2")
    pw = 3 ** np.arange(0, 40, dtype=np.int64)
    b = np.searchsorted(pw, na, side="left")
    return int(b) if np.ndim(n) == 0 else b


def _inv_gamma(gamma):
    g = Fraction(gamma).limit_denominator(10**6)
    inv = 1 / g
    return int(inv) if inv.denominator == 1 else None


def m_of(ell, gamma: float, kappa: float):
    """m_l = max(floor(kappa l^{1/gamma}), 1); integer powers when 1/gamma is an integer."""
    ell = np.asarray(ell, dtype=np.int64)
    p = _inv_gamma(gamma)
    if p is not None:
        x = kappa * (ell**p).astype(float)
    else:
        x = kappa * ell.astype(float) ** (1.0 / gamma)
    m = np.maximum(np.floor(x).astype(np.int64), 1)
    return int(m) if m.ndim == 0 else m


def ell0_of(gamma: float, kappa: float) -> int:
    """First level from which 3^{l-1} >= kappa l^{1/gamma} holds at every later level.

    The plain first solution is not enough: gamma = 1/2, kappa = 1 satisfies
    the inequality at l = 1 and violates it at l = 2.  Past the largest real
    root the exponential side wins for good, so scanning up to a level where
    3^{l-1} clearly dominates settles it.
    """
    last_bad = 0
    ell = 1
    while True:
        lhs = 3.0 ** (ell - 1)
        rhs = kappa * ell ** (1.0 / gamma)
        if lhs < rhs:
            last_bad = ell
        # log 3 beats the derivative (1/gamma)/l of the log of the right side
        elif ell * math.log(3) > 1.0 / gamma and lhs >= 2 * rhs:
            return last_bad + 1
        ell += 1


def K0_of(gamma: float, kappa: float) -> int:
    # m_k <= 3^{k-2} / 4
    k = 1
    while 36 * m_of(k, gamma, kappa) > 3**k:
        k += 1
    return k


def q_of(ell, gamma: float, kappa: float):
    ell = np.asarray(ell, dtype=np.int64)
    m = np.asarray(m_of(ell, gamma, kappa))
    q = (3 ** np.maximum(ell - 2, 0)) // m - 2
    return int(q) if q.ndim == 0 else q


def tau_of(n, gamma: float, kappa: float):
    """Number of complete blocks at the last level b_n (negative values mean none)."""
    na = np.asarray(n, dtype=np.int64)
    b = np.asarray(b_of(na))
    m = np.asarray(m_of(b, gamma, kappa))
    t = (na - 3 ** (b - 1)) // (6 * m) - 2
    return int(t) if t.ndim == 0 else t


@dataclass
class BlockSchedule:
    n: int
    gamma: float
    kappa_block: float
    alpha: float
    b_n: int
    ell0: int
    K0: int
    m: np.ndarray  # m[l] for l = 0..b_n
    q: np.ndarray  # q[l] for l = 0..b_n, 0 below K0
    tau_n: int
    degenerate: bool
    notes: list = field(default_factory=list)

    def m_at(self, ell):
        return int(self.m[ell])

    def n_blocks(self, ell: int, upto: int | None = None) -> int:
        """Blocks of level ``ell`` that enter S_i^diamond for horizon ``upto`` (default n)."""
        i = self.n if upto is None else upto
        if ell < self.K0 or i <= 3 ** (ell - 1):
            return 0
        b = b_of(i) if i >= 2 else 1
        if ell < b:
            return int(self.q[ell])
        if ell == b:
            return max(tau_of(i, self.gamma, self.kappa_block), 0)
        return 0

    def block_range(self, ell: int, j: int):
        """Half-open index range [lo, hi) of the terms in B_{l,j}."""
        m = self.m_at(ell)
        base = 3 ** (ell - 1)
        return base + 6 * j * m + 1, base + 6 * (j + 1) * m + 1

    def bridge(self, ell: int, j: int):
        m = self.m_at(ell)
        base = 3 ** (ell - 1)
        return base + (6 * j - 1) * m + 1, base + (6 * j + 1) * m + 1

    def blocks(self, upto: int | None = None):
        """(l, j, lo, hi) for every block of S_i^diamond, in time order."""
        out = []
        for ell in range(self.K0, self.b_n + 1):
            for j in range(1, self.n_blocks(ell, upto) + 1):
                lo, hi = self.block_range(ell, j)
                out.append((ell, j, lo, hi))
        return out

    def covered(self, upto: int | None = None) -> int:
        return sum(hi - lo for _, _, lo, hi in self.blocks(upto))

    def horizon_needed(self) -> int:
        """Trajectory length that covers every window up to n."""
        return self.n + int(self.m[self.b_n]) + 2

    def first_index(self) -> int:
        """First index of the windowed partial sums, 3^{l0-1} + 1."""
        return 3 ** (self.ell0 - 1) + 1

    def uncovered(self, i: int) -> int:
        return (i - self.first_index() + 1) - self.covered(i)

    def sum_m(self, b: int | None = None) -> int:
        b = self.b_n if b is None else b
        return int(np.sum(m_of(np.arange(1, b + 1), self.gamma, self.kappa_block)))

    def grid(self):
        """Checkpoints 3^l for l >= l0 plus three interior points per level, and n."""
        pts = set()
        for ell in range(self.ell0, self.b_n + 1):
            lo, hi = 3 ** (ell - 1), 3**ell
            for frac in (1, 2, 3):
                pts.add(lo + (hi - lo) * frac // 4)
            pts.add(hi)
        pts.add(self.n)
        first = self.first_index()
        return np.array(sorted(p for p in pts if first <= p <= self.n), dtype=np.int64)

    def to_dict(self):
        return {
            "n": self.n, "gamma": self.gamma, "kappa_block": self.kappa_block,
            "alpha": self.alpha, "b_n": self.b_n, "ell0": self.ell0, "K0": self.K0,
            "tau_n": self.tau_n, "degenerate": self.degenerate,
            "m": [int(a) for a in self.m], "q": [int(a) for a in self.q],
            "notes": list(self.notes),
        }

    def check(self):
        """Raise AssertionError if a schedule invariant fails."""
        assert 3 ** (self.b_n - 1) < self.n <= 3**self.b_n
        for ell in range(self.K0, self.b_n + 1):
            assert self.q[ell] >= 2, (ell, self.q[ell])
        if not self.degenerate:
            assert self.tau_n <= self.q[self.b_n]
        for ell in range(self.K0, self.b_n + 1):
            prev = None
            for j in range(1, int(self.q[ell]) + 1):
                lo, hi = self.block_range(ell, j)
                assert 3 ** (ell - 1) < lo and hi - 1 <= 3**ell
                assert prev is None or lo >= prev
                blo, bhi = self.bridge(ell, j)
                assert bhi - blo == 2 * self.m_at(ell)
                prev = hi


def schedule(n: int, gamma: float, kappa_block: float, delta_hat: float | None = None) -> BlockSchedule:
    if n < 2:
        raise DomainError("n must be >= 2")
    if not (0 < gamma <= 1):
        raise DomainError("gamma must lie in ]0, 1]")
    if not kappa_block > 0:
        raise DomainError("kappa_block must be > 0")
    notes = []
    if delta_hat is not None and delta_hat * (kappa_block / 2) ** gamma < math.log(3):
        msg = (f"kappa_block={kappa_block} gives delta*(kappa/2)^gamma="
               f"{delta_hat * (kappa_block / 2) ** gamma:.4g} < log 3")
        warnings.warn(msg)
        notes.append(msg)
    b = b_of(n)
    ells = np.arange(0, b + 1)
    m = m_of(ells, gamma, kappa_block)
    K0 = K0_of(gamma, kappa_block)
    q = np.where(ells >= K0, q_of(ells, gamma, kappa_block), 0)
    tau = tau_of(n, gamma, kappa_block)
    degenerate = b < K0
    if degenerate:
        notes.append(f"b_n={b} < K0={K0}: no complete level, empty block set")
    s = BlockSchedule(n, float(gamma), float(kappa_block), 1.0 + 1.0 / gamma, b,
                      ell0_of(gamma, kappa_block), K0, m, q, tau, degenerate, notes)
    s.check()
    return s


def suggest_kappa(delta_hat: float, gamma: float) -> float:
    """Smallest kappa with delta (kappa/2)^gamma >= log 3."""
    return 2.0 * (math.log(3) / delta_hat) ** (1.0 / gamma)


# ------------------------------------------------------------------ block sums


@dataclass
class BlockSums:
    sched: BlockSchedule
    keys: list  # (l, j) in time order
    B: np.ndarray
    grid: np.ndarray
    s_diamond: np.ndarray
    s_tilde: np.ndarray
    W: np.ndarray
    W_bar: np.ndarray
    W_tilde: np.ndarray
    gap_exact: np.ndarray  # correctly rounded sum of the uncovered windowed terms
    uncovered: np.ndarray
    # plain partial sums at every block end and checkpoint, for the probe
    event_t: np.ndarray = None
    event_S: np.ndarray = None

    def block(self, ell, j):
        return float(self.B[self.keys.index((ell, j))])


def level_of(k):
    """Level l with 3^{l-1} < k <= 3^l (k = 1 is level 0)."""
    k = np.asarray(k, dtype=np.int64)
    pw = 3 ** np.arange(0, 40, dtype=np.int64)
    return np.searchsorted(pw, k, side="left")


def windowed_terms(sched: BlockSchedule, provider, kind: str = "two_sided"):
    """Windowed values for k = first_index()..n, each at its own level."""
    first = sched.first_index()
    # n below the first windowed index leaves nothing to sum
    out = np.empty(max(sched.n - first + 1, 0))
    for ell in range(sched.ell0, sched.b_n + 1):
        lo = max(3 ** (ell - 1) + 1, first)
        hi = min(3**ell, sched.n)
        if lo > hi:
            continue
        ks = np.arange(lo, hi + 1)
        m = sched.m_at(ell)
        try:
            vals = provider.two_sided(m, ks) if kind == "two_sided" else provider.future(m, ks)
        except Exception as exc:
            raise type(exc)(f"{exc} (level {ell}, k in [{lo}, {hi}])") from exc
        out[lo - first: hi - first + 1] = vals
    return out


def block_sums(sched: BlockSchedule, provider, with_plain: bool = True) -> BlockSums:
    """Assemble B_{l,j}, S^diamond and the W families on the checkpoint grid."""
    first = sched.first_index()
    xt = windowed_terms(sched, provider, "two_sided")
    blocks = sched.blocks()
    keys = [(e, j) for e, j, _, _ in blocks]
    B = np.array([math.fsum(xt[lo - first: hi - first]) for _, _, lo, hi in blocks])
    grid = sched.grid()
    cum_t = np.concatenate([[0.0], np.cumsum(xt)])
    s_tilde = cum_t[grid - first + 1]
    ends = np.array([hi - 1 for _, _, _, hi in blocks], dtype=np.int64)
    cumB = np.concatenate([[0.0], np.cumsum(B)])
    s_diamond = np.empty(grid.size)
    gap = np.empty(grid.size)
    unc = np.empty(grid.size, dtype=np.int64)
    # position of each index in the time-ordered block list, -1 when uncovered
    bid = np.full(xt.size, -1, dtype=np.int64)
    for b, (_, _, lo, hi) in enumerate(blocks):
        bid[lo - first: hi - first] = b
    for g, i in enumerate(grid):
        nb = sum(sched.n_blocks(e, int(i)) for e in range(sched.K0, sched.b_n + 1))
        # blocks of S_i^diamond are a prefix of the time-ordered block list
        assert nb == 0 or ends[nb - 1] <= i
        s_diamond[g] = cumB[nb]
        head = bid[: int(i) - first + 1]
        mask = (head < 0) | (head >= nb)
        unc[g] = int(mask.sum())
        gap[g] = abs(math.fsum(xt[: head.size][mask]))
    if with_plain:
        ks = np.arange(first, sched.n + 1)
        xp = provider.plain(ks)
        xf = windowed_terms(sched, provider, "future")
        W = np.cumsum(xp)[grid - first]
        W_bar = np.cumsum(xf)[grid - first]
        ev = np.union1d(ends, grid)
        Sp = np.concatenate([[0.0], np.cumsum(provider.plain(np.arange(1, sched.n + 1)))])
        ev_S = Sp[ev]
    else:
        W = W_bar = np.full(grid.size, np.nan)
        ev = ev_S = None
    return BlockSums(sched, keys, B, grid, s_diamond, s_tilde, W, W_bar, s_tilde.copy(),
                     gap, unc, ev, ev_S)


def gap_bound_check(sched: BlockSchedule, sums: BlockSums, sup_norm: float) -> dict:
    """Check |S~_i - S_i^diamond| <= sup_norm * (uncovered indices) at every checkpoint.

    The left side is evaluated as the correctly rounded sum of the uncovered
    terms, which is the exact difference of the two partial sums, so the
    comparison involves no accumulated rounding.
    """
    rows = []
    ok_all = True
    for g, i in enumerate(sums.grid):
        bound = sup_norm * float(sums.uncovered[g])
        ok = bool(sums.gap_exact[g] <= bound)
        ok_all &= ok
        b = b_of(int(i))
        sm = sched.sum_m(b)
        rows.append({
            "i": int(i), "gap": float(sums.gap_exact[g]),
            "gap_from_partial_sums": float(abs(sums.s_tilde[g] - sums.s_diamond[g])),
            "uncovered": int(sums.uncovered[g]), "bound": bound, "ok": ok,
            "sum_m": sm, "ratio_to_log_alpha": sm / math.log(i) ** sched.alpha,
        })
    return {"ok": ok_all, "rows": rows,
            "max_ratio": max(r["ratio_to_log_alpha"] for r in rows) if rows else float("nan")}


# ------------------------------------------------------------- variance rate


@dataclass
class VarianceRate:
    ell: np.ndarray
    m: np.ndarray
    nu: np.ndarray
    stderr: np.ndarray
    c2: float
    c2_stderr: float
    detail: dict = field(default_factory=dict)

    @property
    def distance(self):
        return np.abs(self.nu - self.c2)


def block_variance_rate(sched: BlockSchedule, make_provider, ell_range, replicas: int,
                        length: int = 2000, c2=None, threads: int = 1) -> VarianceRate:
    """nu_l = c~_{l,0} + 2 sum_{k=1}^{2 m_l} c~_{l,k} from windowed values.

    ``make_provider(replica_id, n)`` returns a provider with at least n + 1
    terms.  Every level reuses the same replicas, so differences between
    levels are not swamped by sampling noise.  Each replica contributes its
    own estimate over ``length`` consecutive windowed terms (the windowed
    sequence is stationary and has mean zero).  ``c2`` is an optional
    C2Estimate to compare against; by default the covariance series of the
    plain terms from the same replicas is used.
    """
    from .observables import c2_estimate

    ells = [int(e) for e in ell_range]
    for e in ells:
        if e < sched.ell0 or e > sched.b_n:
            raise DomainError(f"level {e} outside [{sched.ell0}, {sched.b_n}]")
    ms = [sched.m_at(e) for e in ells]
    mmax = max(ms)
    n_need = length + 3 * mmax + 2

    def one(r):
        prov = make_provider(r, n_need)
        row = np.empty(len(ells))
        for a, m in enumerate(ms):
            ks = np.arange(m + 1, m + 1 + length)
            x = prov.two_sided(m, ks)
            tot = np.mean(x * x)
            for i in range(1, 2 * m + 1):
                tot += 2.0 * np.mean(x[: length - i] * x[i:])
            row[a] = tot
        return row, prov.plain(np.arange(1, length + 1))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            out = list(ex.map(one, range(replicas)))
    else:
        out = [one(r) for r in range(replicas)]
    per = np.array([o[0] for o in out])
    plain = np.array([o[1] for o in out])
    nu = np.array([math.fsum(per[:, a]) / replicas for a in range(len(ells))])
    se = per.std(axis=0, ddof=1) / math.sqrt(replicas)
    est = c2 if c2 is not None else c2_estimate(plain, "covariance_series", mean=0.0)
    return VarianceRate(np.array(ells), np.array(ms), nu, se, est.c2, est.stderr,
                        {"length": length, "replicas": replicas, "c2_method": est.method})


# ---------------------------------------------------------------- ASIP probe


@dataclass
class ProbeResult:
    grid: np.ndarray
    D: np.ndarray  # (replicas, grid)
    D_median: np.ndarray
    D_q90: np.ndarray
    fit: FitResult
    a: float
    a_ci: tuple
    C: float
    skipped: list
    labeled_heuristic: bool = True


def asip_probe(sched: BlockSchedule, sums_list, c2: float) -> ProbeResult:
    """Heuristic comparison of the partial sums with a Gaussian block sequence.

    Blocks are rank-Gaussianised across replicas: a block's empirical
    quantile becomes the matching quantile of N(0, 6 m_l c2).  The blocks of
    one level are identically distributed, so their quantiles are taken in
    the pooled sample of all replicas and all blocks of that level; ranking
    each block position on its own adds independent O(R^{-1/2}) noise per
    block, which accumulates like sqrt(n / R) and swamps the logarithmic
    rate being probed.  D_n is the largest gap, over block ends and
    checkpoints up to n, between a replica's partial sums and its Gaussian
    block sums.  The exponent a of D_n ~ C (log n)^a is fitted on the
    median curve.  This is a diagnostic only; nothing here couples the sums
    almost surely.
    """
    R = len(sums_list)
    if R < 100:
        raise DataError(f"asip_probe needs >= 100 replicas, got {R}")
    if not c2 > 0:
        raise DomainError("c2 must be > 0")
    keys = sums_list[0].keys
    Bm = np.array([s.B for s in sums_list])  # (R, blocks)
    G = np.zeros_like(Bm)
    skipped = []
    levels = np.array([e for e, _ in keys], dtype=np.int64)
    live = np.ones(len(keys), dtype=bool)
    for b, (ell, j) in enumerate(keys):
        col = Bm[:, b]
        if np.all(col == col[0]):
            skipped.append({"block": [ell, j], "note": "all replicas equal"})
            live[b] = False
    for ell in np.unique(levels):
        cols = np.nonzero((levels == ell) & live)[0]
        if cols.size == 0:
            continue
        vals = Bm[:, cols].ravel()
        order = np.argsort(vals, kind="stable")
        z = np.empty(vals.size)
        z[order] = ndtri((np.arange(vals.size) + 0.5) / vals.size)
        G[:, cols] = (z * math.sqrt(6 * sched.m_at(int(ell)) * c2)).reshape(R, cols.size)
    ends = np.array([sched.block_range(e, j)[1] - 1 for e, j in keys], dtype=np.int64)
    grid = sums_list[0].grid
    ev = sums_list[0].event_t
    D = np.empty((R, grid.size))
    for r, s in enumerate(sums_list):
        cg = np.concatenate([[0.0], np.cumsum(G[r])])
        nb = np.searchsorted(ends, ev, side="right")
        diff = np.abs(s.event_S - cg[nb])
        run = np.maximum.accumulate(diff)
        D[r] = run[np.searchsorted(ev, grid)]
    med = np.median(D, axis=0)
    q90 = np.quantile(D, 0.9, axis=0)
    ok = grid >= 3 ** sched.K0
    fit = linear_fit(np.log(np.log(grid[ok])), np.log(med[ok]), "loglog_median_D")
    ci = (fit.slope - 1.96 * fit.stderr_slope, fit.slope + 1.96 * fit.stderr_slope)
    return ProbeResult(grid, D, med, q90, fit, fit.slope, ci, math.exp(fit.intercept), skipped)
