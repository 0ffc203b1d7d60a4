"""Tower chains: a Markov shift that climbs deterministically and regenerates.

States are pairs (w, l) with 0 <= l < h(w).  Below the top the chain climbs
to (w, l+1); from the top (w, h(w)-1) it jumps to (e, 0) where e is the
innovation of that step, drawn from the letter law pA.  The stationary law
is nu(w, l) = pA(w) / E[h].

Randomness layout for one replica with stream key K:

* counter 0 of K places g_0 (inverse CDF of nu over states);
* counter k >= 1 of K gives the innovation e_k;
* counter 0 of ``derive_key(K, 1)`` places the second copy g*_0 in coupled runs.

Both copies of a coupled pair read the same innovations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import sparse

from . import _kernels as K
from .errors import CapacityError, ConstructionError, DataError, DomainError
from .rng import derive_key, key_of, stream_keys, uniforms
from .stat_fit import TailCurve

DENSE_LIMIT = 2000


class TowerState(NamedTuple):
    w: object
    ell: int


class TowerSpec:
    """Finite tower.  Immutable after construction."""

    def __init__(self, heights, probs, labels=None, truncated_mass=0.0, source="explicit"):
        h = np.asarray(heights, dtype=np.int64)
        p = np.asarray(probs, dtype=float)
        if h.ndim != 1 or h.size == 0 or h.shape != p.shape:
            raise ConstructionError("heights and probs must be nonempty 1-d arrays of equal length")
        if np.any(h < 1):
            raise ConstructionError("all heights must be >= 1")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ConstructionError("letter probabilities must be finite and >= 0")
        total = math.fsum(p)
        if total <= 0:
            raise ConstructionError("letter law has zero total mass")
        if abs(total - 1.0) > 1e-12:
            raise ConstructionError(f"letter probabilities sum to {total!r}, not 1")
        g = int(np.gcd.reduce(h[p > 0]))
        if g != 1:
            raise ConstructionError(f"periodic tower: gcd of heights is {g}")
        self.h = h
        self.pA = p
        self.labels = list(labels) if labels is not None else list(range(h.size))
        self.truncated_mass = float(truncated_mass)
        self.source = source
        self.E_h = math.fsum(p * h)
        self.offsets = np.concatenate([[0], np.cumsum(h)[:-1]]).astype(np.int64)
        self.n_states = int(h.sum())
        self.state_letter = np.repeat(np.arange(h.size, dtype=np.int64), h)
        self.state_level = np.arange(self.n_states, dtype=np.int64) - self.offsets[self.state_letter]
        self.cdf = np.cumsum(p)
        self.nu = p[self.state_letter] / self.E_h
        self.nu_cdf = np.cumsum(self.nu)
        for a in (self.h, self.pA, self.offsets, self.state_letter, self.state_level,
                  self.cdf, self.nu, self.nu_cdf):
            a.flags.writeable = False

    @property
    def n_letters(self):
        return self.h.size

    @property
    def h_max(self):
        return int(self.h.max())

    def index(self, state: TowerState) -> int:
        w = self.labels.index(state.w)
        if not 0 <= state.ell < self.h[w]:
            raise DomainError(f"level {state.ell} not below height {self.h[w]}")
        return int(self.offsets[w] + state.ell)

    def state(self, idx: int) -> TowerState:
        return TowerState(self.labels[self.state_letter[idx]], int(self.state_level[idx]))

    def is_top(self, idx):
        return self.state_level[idx] == self.h[self.state_letter[idx]] - 1

    def step(self, state: TowerState, innovation) -> TowerState:
        """The update rule U((w, l), e)."""
        w = self.labels.index(state.w)
        if state.ell < self.h[w] - 1:
            return TowerState(state.w, state.ell + 1)
        return TowerState(innovation, 0)

    def letter_of(self, u):
        """Inverse-CDF letter index for uniforms u."""
        return np.minimum(np.searchsorted(self.cdf, u, side="right"), self.n_letters - 1)

    def state_of(self, u):
        return np.minimum(np.searchsorted(self.nu_cdf, u, side="right"), self.n_states - 1)

    def height_tail(self, n):
        """P(h > n) under pA."""
        return math.fsum(self.pA[self.h > n])

    def summary(self):
        return {
            "source": self.source,
            "n_letters": int(self.n_letters),
            "n_states": self.n_states,
            "E_h": self.E_h,
            "h_max": self.h_max,
            "truncated_mass": self.truncated_mass,
        }


def explicit_tower(heights, probs, labels=None) -> TowerSpec:
    return TowerSpec(heights, probs, labels)


def synthetic_letter_law(gamma: float, kappa_tail: float, n_max: int):
    """pA(w) proportional to exp(-k w^g) - exp(-k (w+1)^g) on 1..n_max, tail folded into n_max."""
    if not (0 < gamma <= 1):
        raise DomainError("gamma must lie in ]0, 1]")
    if not kappa_tail > 0:
        raise DomainError("kappa_tail must be > 0")
    if n_max < 2:
        raise DomainError("n_max must be >= 2")
    w = np.arange(1, n_max + 1, dtype=float)
    # normalised by the total exp(-k), so P(h >= n) = exp(-k (n^g - 1))
    p = np.exp(-kappa_tail * (w**gamma - 1.0)) * -np.expm1(-kappa_tail * ((w + 1.0) ** gamma - w**gamma))
    trunc = math.exp(-kappa_tail * (n_max**gamma - 1.0))
    p[-1] = trunc
    p /= math.fsum(p)
    return w.astype(np.int64), p, trunc


def make_tower(scheme=None, synthetic=None) -> TowerSpec:
    """Tower from an inducing scheme or from a synthetic stretched-exponential law.

    ``synthetic`` is ``(gamma, kappa_tail, n_max)``.  For a scheme the letters
    are the branch labels, h is the return time and pA the normalised branch
    length, with the uncovered residual folded into the last branch.
    """
    if (scheme is None) == (synthetic is None):
        raise ConstructionError("give exactly one of scheme or synthetic")
    if synthetic is not None:
        gamma, kappa_tail, n_max = synthetic
        h, p, trunc = synthetic_letter_law(gamma, kappa_tail, int(n_max))
        return TowerSpec(h, p, labels=[int(a) for a in h], truncated_mass=trunc,
                         source=f"synthetic(gamma={gamma!r}, kappa_tail={kappa_tail!r}, n_max={int(n_max)})")
    if not scheme.branches:
        raise ConstructionError("inducing scheme has no branches")
    p = scheme.lengths().copy()
    p[-1] += scheme.residual_mass
    total = math.fsum(p)
    if total <= 0:
        raise ConstructionError("inducing scheme has zero mass")
    p /= total
    h = np.array([b.n for b in scheme.branches], dtype=np.int64)
    return TowerSpec(h, p, labels=[int(a) for a in h], truncated_mass=scheme.residual_mass,
                     source=f"map(gamma={scheme.params.gamma!r}, n_max={scheme.n_max})")


def stationary(spec: TowerSpec) -> np.ndarray:
    """nu over state indices."""
    return spec.nu.copy()


def transition_matrix(spec: TowerSpec):
    """Sparse kernel P with P[s, t] = P(g_1 = t | g_0 = s)."""
    n = spec.n_states
    top = spec.state_level == spec.h[spec.state_letter] - 1
    rows, cols, vals = [], [], []
    climb = np.nonzero(~top)[0]
    rows.append(climb)
    cols.append(climb + 1)
    vals.append(np.ones(climb.size))
    tops = np.nonzero(top)[0]
    support = np.nonzero(spec.pA > 0)[0]
    rows.append(np.repeat(tops, support.size))
    cols.append(np.tile(spec.offsets[support], tops.size))
    vals.append(np.tile(spec.pA[support], tops.size))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


@dataclass
class Trajectory:
    """g_0..g_n as letter indices and levels; ``innov[k]`` is e_k (``innov[0]`` unused)."""

    spec: TowerSpec
    letter: np.ndarray
    level: np.ndarray
    innov: np.ndarray
    key: int = 0

    def __len__(self):
        return self.letter.size

    @property
    def in_S0(self):
        return self.level == 0

    @property
    def in_Sc(self):
        return self.level == self.spec.h[self.letter] - 1

    def state_index(self):
        return self.spec.offsets[self.letter] + self.level

    def states(self):
        lab = self.spec.labels
        return [TowerState(lab[w], int(l)) for w, l in zip(self.letter, self.level)]


def innovations(spec: TowerSpec, key: int, start: int, stop: int) -> np.ndarray:
    """Letter indices e_k for start <= k < stop."""
    return spec.letter_of(uniforms(key, np.arange(start, stop, dtype=np.uint64)))


def simulate(spec: TowerSpec, n: int, seed, start_state=None) -> Trajectory:
    """Trajectory g_0..g_n with g_0 ~ nu (or ``start_state``)."""
    if n < 0:
        raise DomainError("n must be >= 0")
    key = key_of(seed)
    if start_state is None:
        s0 = int(spec.state_of(uniforms(key, 0)))
    else:
        s0 = spec.index(start_state)
    innov = np.empty(n + 1, dtype=np.int64)
    innov[0] = -1
    innov[1:] = innovations(spec, key, 1, n + 1)
    letter = np.empty(n + 1, dtype=np.int64)
    level = np.empty(n + 1, dtype=np.int64)
    K.evolve(spec.h, spec.state_letter[s0], spec.state_level[s0], innov, letter, level)
    return Trajectory(spec, letter, level, innov, key)


def exact_meeting_tail(spec: TowerSpec, n_max: int, reduced: bool = False) -> TailCurve:
    """P(T >= n), n = 0..n_max, for two stationary copies sharing innovations.

    The dense version evolves the joint law of unmet pairs on S x S.  Two
    copies can only meet by regenerating at the same step (or by starting in
    the same state), so the law of the pair of remaining times to the top
    carries the same information; ``reduced=True`` evolves that smaller
    chain on {0..h_max-1}^2 instead.
    """
    if n_max < 0:
        raise DomainError("n_max must be >= 0")
    if reduced:
        return _meeting_tail_reduced(spec, n_max)
    n = spec.n_states
    if n > DENSE_LIMIT:
        raise CapacityError(f"{n} states exceed the dense pair-chain limit {DENSE_LIMIT}; "
                            "use reduced=True or simulate_meeting")
    nu = spec.nu
    M = np.outer(nu, nu)
    np.fill_diagonal(M, 0.0)
    top = spec.state_level == spec.h[spec.state_letter] - 1
    low = ~top
    low_idx = np.nonzero(low)[0]
    base = spec.offsets
    p = np.ones(n_max + 1)
    for k in range(1, n_max + 1):
        p[k] = math.fsum(M.ravel())
        if k == n_max:
            break
        new = np.zeros_like(M)
        new[np.ix_(low_idx + 1, low_idx + 1)] = M[np.ix_(low_idx, low_idx)]
        # one copy at the top regenerates while the other climbs
        col = M[top][:, low].sum(axis=0)
        new[np.ix_(base, low_idx + 1)] += np.outer(spec.pA, col)
        row = M[low][:, top].sum(axis=1)
        new[np.ix_(low_idx + 1, base)] += np.outer(row, spec.pA)
        M = new
    return TailCurve(np.arange(n_max + 1), p, np.zeros(n_max + 1))


def _meeting_tail_reduced(spec: TowerSpec, n_max: int) -> TailCurve:
    H = spec.h_max
    # r = remaining steps to the top; nu_r(r) = P(h > r) / E_h
    pr = np.zeros(H)
    np.add.at(pr, spec.h - 1, spec.pA)
    tail = np.cumsum(pr[::-1])[::-1]  # P(h > r) = P(h - 1 >= r)
    nur = tail / spec.E_h
    sq = np.zeros(H)
    np.add.at(sq, spec.h - 1, (spec.pA / spec.E_h) ** 2)
    same = np.cumsum(sq[::-1])[::-1]
    M = np.outer(nur, nur)
    M[np.diag_indices(H)] -= same
    np.clip(M, 0.0, None, out=M)
    q = pr  # law of h - 1 for a fresh letter
    p = np.ones(n_max + 1)
    for k in range(1, n_max + 1):
        p[k] = math.fsum(M.ravel())
        if k == n_max:
            break
        new = np.zeros_like(M)
        new[:-1, :-1] = M[1:, 1:]
        new[:, :-1] += np.outer(q, M[0, 1:])
        new[:-1, :] += np.outer(M[1:, 0], q)
        M = new
    return TailCurve(np.arange(n_max + 1), p, np.zeros(n_max + 1))


def meeting_times(spec: TowerSpec, replicas: int, n_max: int, master: int, start: int = 0):
    """Meeting times of replicas ``start..start+replicas-1`` (n_max+1 means censored)."""
    keys = stream_keys(master, replicas, start)
    pkeys = np.asarray(derive_key(keys, 1), dtype=np.uint64)
    out = np.empty(replicas, dtype=np.int64)
    bad = K.meeting_times(keys, pkeys, spec.h, spec.cdf, spec.nu_cdf,
                          spec.state_letter, spec.state_level, n_max, out)
    return out, int(bad)


def tail_from_times(times, n_max: int) -> TailCurve:
    t = np.asarray(times)
    r = t.size
    counts = np.bincount(np.minimum(t, n_max + 1), minlength=n_max + 2)
    ge = np.cumsum(counts[::-1])[::-1][: n_max + 1]
    p = ge / r
    return TailCurve(np.arange(n_max + 1), p, np.sqrt(p * (1 - p) / r))


def simulate_meeting(spec: TowerSpec, replicas: int, n_max: int, seed) -> TailCurve:
    """Empirical P(T >= n) with binomial standard errors.

    Raises ``AssertionError`` if any pair separates after meeting.
    """
    if replicas < 1:
        raise DomainError("replicas must be >= 1")
    times, bad = meeting_times(spec, replicas, n_max, key_of(seed))
    if bad:
        raise AssertionError(f"{bad} coupled steps disagreed after meeting")
    return tail_from_times(times, n_max)


@dataclass
class RenewalStats:
    R: np.ndarray
    tau_renewal: np.ndarray
    s: np.ndarray
    kappa_renewal: float
    case: str
    identity_holds: bool
    empty: bool = False

    def summary(self):
        return {
            "kappa_renewal": self.kappa_renewal,
            "mean_tau": float(self.tau_renewal.mean()) if self.tau_renewal.size else float("nan"),
            "count": int(self.tau_renewal.size),
            "case": self.case,
            "identity_holds": self.identity_holds,
        }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "R_i", "tau_i"])
            for i in range(1, self.R.size):
                w.writerow([i, int(self.R[i]), int(self.tau_renewal[i - 1])])


def renewal_stats(spec: TowerSpec, traj: Trajectory) -> RenewalStats:
    """Renewal times R_i (visits to the top at n > 0), gaps and S_0 counts."""
    if len(traj) == 0:
        raise DataError("empty trajectory")
    top = traj.in_Sc
    s0 = traj.in_S0
    R = np.nonzero(top)[0]
    R = R[R > 0]
    tau = np.diff(R)
    s = np.cumsum(s0.astype(np.int64))
    g0_in = bool(s0[0])
    # each S_0 visit at i >= 1 follows an S_c visit at i - 1
    pred = np.concatenate([[0], np.cumsum(top[:-1].astype(np.int64))]) + int(g0_in)
    ok = bool(np.array_equal(pred, s))
    empty = tau.size == 0
    kappa = 1.0 / (4.0 * tau.mean()) if not empty else float("nan")
    return RenewalStats(R, tau, s, kappa, "g0_in_S0" if g0_in else "g0_not_in_S0", ok, empty)


def delta_decay(spec: TowerSpec, theta: float, ell_max: int, replicas: int, seed,
                chunk: int = 1 << 16) -> TailCurve:
    """Monte Carlo E[theta^{s_l}], l = 0..ell_max, from stationary starts."""
    if not 0 < theta < 1:
        raise DomainError("theta must lie in ]0, 1[")
    if replicas < 2:
        raise DomainError("replicas must be >= 2")
    master = key_of(seed)
    acc = np.zeros(ell_max + 1)
    acc2 = np.zeros(ell_max + 1)
    for start in range(0, replicas, chunk):
        c = min(chunk, replicas - start)
        a = np.zeros(ell_max + 1)
        a2 = np.zeros(ell_max + 1)
        K.theta_s_sums(stream_keys(master, c, start), spec.h, spec.cdf, spec.nu_cdf,
                       spec.state_letter, spec.state_level, float(theta), ell_max, a, a2)
        acc += a
        acc2 += a2
    mean = acc / replicas
    var = np.maximum(acc2 / replicas - mean**2, 0.0) * replicas / (replicas - 1)
    return TailCurve(np.arange(ell_max + 1), mean, np.sqrt(var / replicas))


def delta_decay_exact(spec: TowerSpec, theta: float, ell_max: int) -> TailCurve:
    """E[theta^{s_l}] by propagating the theta-weighted state law."""
    if not 0 < theta < 1:
        raise DomainError("theta must lie in ]0, 1[")
    PT = transition_matrix(spec).T.tocsr()
    w0 = np.where(spec.state_level == 0, theta, 1.0)
    a = spec.nu * w0
    out = np.empty(ell_max + 1)
    out[0] = a.sum()
    for k in range(1, ell_max + 1):
        a = (PT @ a) * w0
        out[k] = a.sum()
    return TailCurve(np.arange(ell_max + 1), out, np.zeros(ell_max + 1))


def separation_distance(traj_a, traj_b, lam: float) -> float:
    """lambda^{-#{1 <= k <= n : g_k in S_0}} with n the last index of agreement.

    Trajectories are Trajectory objects or sequences of TowerState.  If they
    agree over the whole common window the distance is 0.
    """
    if not lam > 1:
        raise DomainError("lambda must be > 1")
    a = traj_a.states() if isinstance(traj_a, Trajectory) else list(traj_a)
    b = traj_b.states() if isinstance(traj_b, Trajectory) else list(traj_b)
    if not a or not b:
        raise DataError("trajectories must be nonempty")
    m = min(len(a), len(b))
    count = 0
    for k in range(m):
        if a[k] != b[k]:
            return float(lam ** (-count))
        if k >= 1 and a[k].ell == 0:
            count += 1
    return 0.0
