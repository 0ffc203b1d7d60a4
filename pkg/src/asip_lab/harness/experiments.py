"""One routine per experiment name; each returns a Report.

Replica r of a computation tagged ``name`` always reads its random numbers
from ``seed_stream(tag_master(master_seed, name), r)``, so a run is
reproducible whatever the number of worker threads.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

import numpy as np

from .. import blocks as bl
from .. import interval_maps as im
from .. import observables as ob
from .. import tower as tw
from ..errors import NumericError
from ..rng import seed_stream, tag_master
from ..stat_fit import ks_normal_test, lil_ratio, stretched_exp_fit
from . import config as cf
from .reports import Report, jsonable


class ExperimentFailure(Exception):
    """An operation inside an experiment failed; ``code`` is the exit code."""

    def __init__(self, op, params, exc):
        self.op = op
        self.params = params
        self.cause = exc
        if isinstance(exc, ValueError):
            self.code = 2
        else:
            self.code = 3
        args = ", ".join(f"{k}={v!r}" for k, v in params.items())
        super().__init__(f"{op}({args}) failed: {type(exc).__name__}: {exc}")


@contextmanager
def step(op, **params):
    try:
        yield
    except ExperimentFailure:
        raise
    except (ValueError, ArithmeticError, OSError, IndexError, AssertionError) as exc:
        raise ExperimentFailure(op, params, exc) from exc


def pool_map(fn, items, threads: int = 1):
    """``[fn(x) for x in items]``, optionally on a thread pool; order is kept."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


# ------------------------------------------------------------------ builders


def build_tower(system) -> tw.TowerSpec:
    if isinstance(system, cf.SyntheticTower):
        with step("tower.make_tower", synthetic=(system.gamma, system.kappa_tail, system.n_max)):
            return tw.make_tower(synthetic=(system.gamma, system.kappa_tail, system.n_max))
    if isinstance(system, cf.ExplicitTower):
        with step("tower.explicit_tower", heights=system.heights):
            return tw.explicit_tower(system.heights, system.probs)
    if isinstance(system, cf.MapTower):
        with step("tower.make_tower", gamma=system.gamma, n_max=system.n_max):
            p = im.make_map(system.gamma)
            return tw.make_tower(scheme=im.branch_partition(p, system.n_max))
    raise TypeError(f"not a tower system: {system!r}")


def system_gamma(system):
    if isinstance(system, (cf.MapSystem, cf.SyntheticTower, cf.MapTower)):
        return system.gamma
    return None


class ProviderFactory:
    """Windowed-value providers for independent replicas of one system."""

    def __init__(self, system, observable, master: int, name: str):
        self.master = tag_master(master, name)
        self.is_map = isinstance(system, cf.MapSystem)
        if self.is_map:
            self.obs = ob.centered_identity() if observable.kind == "identity" else ob.doubling_coboundary()
            self.spec = None
        else:
            self.spec = build_tower(system)
            theta = observable.theta
            with step("observables.TowerObservable.parity", theta=theta):
                self.obs = ob.TowerObservable.parity(self.spec, theta, observable.rho_only or theta == 0)

    @property
    def sup_norm(self):
        return self.obs.sup_norm

    def __call__(self, r: int, n: int, m_max: int = 0):
        seed = seed_stream(self.master, r)
        if self.is_map:
            return ob.DigitSeries(self.obs, n + m_max + 1, seed)
        return ob.TowerSeries.simulate(self.obs, n + 1, seed, m_max=m_max + 1)

    def plain(self, r: int, n: int):
        return self(r, n).plain(np.arange(n))

    def describe(self):
        return self.obs.describe() if hasattr(self.obs, "describe") else {}


def _seeds(cfg, *names):
    return {"master_seed": cfg.master_seed,
            "derivation": "replica r of part NAME: seed_stream(tag_master(master_seed, NAME), r)",
            "parts": {n: tag_master(cfg.master_seed, n) for n in names}}


def _fit(curve, n_range):
    lo, hi = n_range
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        g, k, fit = stretched_exp_fit(curve, (lo, hi))
    return {"gamma_hat": g, "kappa_hat": k, "fit": fit.to_dict(), "fit_range": [lo, hi],
            "warnings": [str(w.message) for w in caught]}


# ---------------------------------------------------------------- experiments


def run_map_tails(cfg: cf.MapTails, threads: int = 1) -> Report:
    with step("interval_maps.u_orbit", gamma=cfg.gamma, x0=cfg.x0, n=cfg.n_max):
        p = im.make_map(cfg.gamma)
        orb = im.u_orbit(p, cfg.x0, cfg.n_max)
    n = np.arange(orb.u.size)
    with step("stat_fit.stretched_exp_fit", fit_range=cfg.fit_range):
        fit = _fit((n[1:], orb.mass[1:]), cfg.fit_range)
    d1, d2 = orb.bracket(cfg.gamma)
    res = {"params": {"gamma": p.gamma, "beta": p.beta, "c": p.c}, **fit,
           "delta1": d1, "delta2": d2, "eta1": d2, "eta2": d1,
           "mass_10": float(orb.mass[10]) if orb.mass.size > 10 else None}
    rows = [(int(i), float(u), float(m)) for i, u, m in zip(n, orb.u, orb.mass)]
    return Report("map_tails", cfg.model_dump(mode="json"), ["n", "u_n", "mass"], rows, res,
                  {"master_seed": cfg.master_seed, "note": "deterministic"})


def run_map_verify(cfg: cf.MapVerify, threads: int = 1) -> Report:
    p = im.make_map(cfg.gamma)
    with step("interval_maps.branch_partition", gamma=cfg.gamma, n_max=cfg.n_max):
        scheme = im.branch_partition(p, cfg.n_max)
    key = seed_stream(tag_master(cfg.master_seed, "pairs"), 0)
    with step("interval_maps.verify_gm", pairs_per_branch=cfg.pairs_per_branch):
        rep = im.verify_gm(p, scheme, cfg.pairs_per_branch, key)
    n_small = min(cfg.n_small, cfg.n_max)
    c_small = rep.max_distortion(n_small)
    c_all = rep.max_distortion(cfg.n_max)
    res = {"min_expansion": rep.overall_min_expansion,
           "min_expansion_upto_n_small": float(np.min(rep.min_expansion[:n_small])),
           "distortion_n_small": c_small, "distortion_n_max": c_all,
           "distortion_ratio": c_all / c_small if c_small > 0 else (1.0 if c_all == 0 else math.inf),
           "residual_mass": scheme.residual_mass, "samples_used": rep.samples_used}
    rows = [(b.n, b.x_lo, b.x_hi, b.length, float(rep.min_expansion[i]),
             float(rep.per_n_distortion[i]))
            for i, b in enumerate(scheme.branches)]
    return Report("map_verify", cfg.model_dump(mode="json"),
                  ["n", "x_lo", "x_hi", "length", "min_expansion", "distortion"], rows, res,
                  _seeds(cfg, "pairs"))


def _mc_meeting(spec, replicas, n_max, master, threads):
    chunk = max(1, -(-replicas // max(threads, 1)))
    starts = list(range(0, replicas, chunk))

    def work(s):
        return tw.meeting_times(spec, min(chunk, replicas - s), n_max, master, s)

    parts = pool_map(work, starts, threads)
    bad = sum(b for _, b in parts)
    if bad:
        raise NumericError("coupled copies disagreed after meeting", disagreements=bad)
    return tw.tail_from_times(np.concatenate([t for t, _ in parts]), n_max)


def run_tower_meeting(cfg: cf.TowerMeeting, threads: int = 1) -> Report:
    spec = build_tower(cfg.system)
    master = tag_master(cfg.master_seed, "meeting")
    if cfg.method == "exact":
        with step("tower.exact_meeting_tail", n_max=cfg.n_max, n_states=spec.n_states):
            curve = tw.exact_meeting_tail(spec, cfg.n_max, reduced=spec.n_states > tw.DENSE_LIMIT)
    else:
        with step("tower.meeting_times", replicas=cfg.replicas, n_max=cfg.n_max):
            curve = _mc_meeting(spec, cfg.replicas, cfg.n_max, master, threads)
    rng_ = cfg.fit_range or (max(cfg.n_max // 2, 1), cfg.n_max)
    with step("stat_fit.stretched_exp_fit", fit_range=rng_):
        fit = _fit(curve, rng_)
    g = system_gamma(cfg.system) or fit["gamma_hat"]
    res = {"tower": spec.summary(), **fit, "delta_hat": fit["kappa_hat"],
           "suggested_kappa_block": bl.suggest_kappa(fit["kappa_hat"], g)}
    return Report("tower_meeting", cfg.model_dump(mode="json"), ["n", "p", "stderr"],
                  curve.rows(), res, _seeds(cfg, "meeting"))


def run_delta_decay(cfg: cf.DeltaDecay, threads: int = 1) -> Report:
    spec = build_tower(cfg.system)
    master = tag_master(cfg.master_seed, "delta")
    if cfg.method == "exact":
        with step("tower.delta_decay_exact", theta=cfg.theta, ell_max=cfg.ell_max):
            curve = tw.delta_decay_exact(spec, cfg.theta, cfg.ell_max)
    else:
        with step("tower.delta_decay", theta=cfg.theta, ell_max=cfg.ell_max, replicas=cfg.replicas):
            curve = tw.delta_decay(spec, cfg.theta, cfg.ell_max, cfg.replicas, master)
    rng_ = cfg.fit_range or (max(cfg.ell_max // 10, 1), cfg.ell_max)
    with step("stat_fit.stretched_exp_fit", fit_range=rng_):
        fit = _fit(curve, rng_)
    res = {"tower": spec.summary(), **fit}
    return Report("delta_decay", cfg.model_dump(mode="json"), ["n", "p", "stderr"],
                  curve.rows(), res, _seeds(cfg, "delta"))


def _plain_samples(fac, replicas, length, threads):
    return np.array(pool_map(lambda r: fac.plain(r, length), range(replicas), threads))


def run_covariance(cfg: cf.Covariance, threads: int = 1) -> Report:
    fac = ProviderFactory(cfg.system, cfg.observable, cfg.master_seed, "series")
    X = _plain_samples(fac, cfg.replicas, cfg.length, threads)
    with step("observables.covariance", max_lag=cfg.max_lag, replicas=cfg.replicas):
        cc = ob.covariance(X, cfg.max_lag, "replicas", mean=0.0)
    res = {"observable": jsonable(fac.describe())}
    if fac.is_map and cfg.observable.kind == "identity":
        res["oracle"] = [2.0 ** (-i) / 12.0 for i in range(cfg.max_lag + 1)]
        res["z_scores"] = [(c - o) / s for c, o, s in zip(cc.cov, res["oracle"], cc.stderr)]
    return Report("covariance", cfg.model_dump(mode="json"), ["lag", "cov", "stderr"],
                  cc.rows(), res, _seeds(cfg, "series"))


def run_variance(cfg: cf.Variance, threads: int = 1) -> Report:
    from ..errors import ExtrapolationError

    fac = ProviderFactory(cfg.system, cfg.observable, cfg.master_seed, "series")
    X = _plain_samples(fac, cfg.replicas, cfg.length, threads)
    res = {}
    with step("observables.c2_estimate", method="covariance_series"):
        e = ob.c2_estimate(X, "covariance_series", max_lag=cfg.max_lag, mean=0.0)
    res["covariance_series"] = {"c2": e.c2, "stderr": e.stderr, "detail": jsonable(e.detail)}
    rows = []
    try:
        e2 = ob.c2_estimate(X, "normalized_second_moment", n_grid=cfg.horizons, mean=0.0)
        res["normalized_second_moment"] = {"c2": e2.c2, "stderr": e2.stderr,
                                           "slope": e2.detail["slope"]}
        curve = e2.detail["curve"]
    except ExtrapolationError as exc:
        res["normalized_second_moment"] = {"error": str(exc)}
        curve = exc.curve
    for n, y, s in zip(curve["n"], curve["mean_Sn2_over_n"], curve["stderr"]):
        rows.append((int(n), float(y), float(s)))
    res["c2_hat"] = e.c2
    return Report("variance", cfg.model_dump(mode="json"), ["n", "mean_Sn2_over_n", "stderr"],
                  rows, res, _seeds(cfg, "series"))


def _schedule(n, gamma, kappa, delta_hat=None):
    with step("block_scheme.schedule", n=n, gamma=gamma, kappa_block=kappa):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            s = bl.schedule(n, gamma, kappa, delta_hat)
    return s, [str(w.message) for w in caught]


def run_blocks_schedule(cfg: cf.BlocksSchedule, threads: int = 1) -> Report:
    s, warn = _schedule(cfg.n, cfg.gamma, cfg.kappa_block, cfg.delta_hat)
    rows = []
    for ell in range(1, s.b_n + 1):
        nb = s.n_blocks(ell)
        lo = s.block_range(ell, 1)[0] if nb else ""
        hi = s.block_range(ell, nb)[1] - 1 if nb else ""
        rows.append((ell, s.m_at(ell), int(s.q[ell]), nb, lo, hi))
    res = {"schedule": s.to_dict(), "warnings": warn, "covered": s.covered(),
           "uncovered": s.uncovered(s.n), "sum_m": s.sum_m()}
    if cfg.delta_hat is not None:
        res["suggested_kappa_block"] = bl.suggest_kappa(cfg.delta_hat, cfg.gamma)
    return Report("blocks_schedule", cfg.model_dump(mode="json"),
                  ["level", "m", "q", "n_blocks", "first_index", "last_index"], rows, res,
                  {"master_seed": cfg.master_seed, "note": "deterministic"})


def _block_gamma(cfg):
    g = cfg.gamma if cfg.gamma is not None else system_gamma(cfg.system)
    if g is None:
        raise ExperimentFailure("block_scheme.schedule", {},
                                ValueError("gamma is required for explicit towers"))
    return g


def run_blocks_gap(cfg: cf.BlocksGap, threads: int = 1) -> Report:
    s, warn = _schedule(cfg.n, _block_gamma(cfg), cfg.kappa_block)
    fac = ProviderFactory(cfg.system, cfg.observable, cfg.master_seed, "gap")

    def work(r):
        prov = fac(r, s.n, s.m_at(s.b_n))
        with step("block_scheme.block_sums", replica=r, n=s.n):
            sums = bl.block_sums(s, prov, with_plain=False)
        return bl.gap_bound_check(s, sums, fac.sup_norm)

    reports = pool_map(work, range(cfg.replicas), threads)
    rows, fails = [], []
    for r, rep in enumerate(reports):
        for row in rep["rows"]:
            rows.append((r, row["i"], row["gap"], row["uncovered"], row["bound"], row["ok"],
                         row["sum_m"], row["ratio_to_log_alpha"]))
            if not row["ok"]:
                fails.append({"replica": r, "checkpoint": row["i"], "gap": row["gap"],
                              "bound": row["bound"]})
    res = {"schedule": s.to_dict(), "warnings": warn, "sup_norm": fac.sup_norm,
           "all_ok": not fails,
           "max_ratio_to_log_alpha": max(rep["max_ratio"] for rep in reports)}
    return Report("blocks_gap", cfg.model_dump(mode="json"),
                  ["replica", "i", "gap", "uncovered", "bound", "ok", "sum_m", "ratio_to_log_alpha"],
                  rows, res, _seeds(cfg, "gap"), fails)


def block_correlations(s, fac, level, replicas, threads=1):
    """Correlation matrix of the blocks of one level across independent replicas."""
    nb = int(s.q[level])
    n_need = s.block_range(level, nb)[1]

    def work(r):
        prov = fac(r, n_need, s.m_at(level))
        out = np.empty(nb)
        for j in range(1, nb + 1):
            lo, hi = s.block_range(level, j)
            out[j - 1] = math.fsum(prov.two_sided(s.m_at(level), np.arange(lo, hi)))
        return out

    B = np.array(pool_map(work, range(replicas), threads))
    C = np.corrcoef(B, rowvar=False)
    far = [abs(C[a, b]) for a in range(nb) for b in range(a + 2, nb)]
    near = [abs(C[a, a + 1]) for a in range(nb - 1)]
    return {"level": level, "blocks": nb, "replicas": replicas,
            "max_abs_corr_far": max(far) if far else 0.0,
            "max_abs_corr_adjacent": max(near) if near else 0.0,
            "threshold": 3.0 / math.sqrt(replicas),
            "ok": (max(far) if far else 0.0) <= 3.0 / math.sqrt(replicas),
            "corr": C}


def run_block_variance(cfg: cf.BlockVariance, threads: int = 1) -> Report:
    s, warn = _schedule(cfg.n, _block_gamma(cfg), cfg.kappa_block)
    fac = ProviderFactory(cfg.system, cfg.observable, cfg.master_seed, "nu")
    lo, hi = cfg.ell_range
    mmax = s.m_at(min(hi, s.b_n))
    with step("block_scheme.block_variance_rate", ell_range=cfg.ell_range, replicas=cfg.replicas):
        vr = bl.block_variance_rate(s, lambda r, n: fac(r, n, mmax), range(lo, hi + 1),
                                    cfg.replicas, cfg.length, threads=threads)
    d = vr.distance
    res = {"schedule": s.to_dict(), "warnings": warn, "c2_hat": vr.c2, "c2_stderr": vr.c2_stderr,
           "distance_decreasing": bool(np.all(np.diff(d) < 0)),
           "final_gap_ratio": float(d[-1] / vr.c2), "nu_nonnegative":
           bool(np.all(vr.nu >= -2 * vr.stderr)), "detail": vr.detail}
    if cfg.correlation_level is not None:
        cfac = ProviderFactory(cfg.system, cfg.observable, cfg.master_seed, "corr")
        with step("block_correlations", level=cfg.correlation_level,
                  replicas=cfg.correlation_replicas):
            corr = block_correlations(s, cfac, cfg.correlation_level, cfg.correlation_replicas,
                                      threads)
        res["block_correlation"] = corr
    rows = [(int(e), int(m), float(v), float(se), float(dd))
            for e, m, v, se, dd in zip(vr.ell, vr.m, vr.nu, vr.stderr, d)]
    return Report("block_variance", cfg.model_dump(mode="json"),
                  ["level", "m", "nu", "stderr", "distance"], rows, res, _seeds(cfg, "nu", "corr"))


def run_asip_probe(cfg: cf.AsipProbe, threads: int = 1) -> Report:
    s, warn = _schedule(cfg.n, _block_gamma(cfg), cfg.kappa_block)
    fac = ProviderFactory(cfg.system, cfg.observable, cfg.master_seed, "probe")
    head = min(4000, s.n)

    def work(r):
        prov = fac(r, s.n, s.m_at(s.b_n))
        with step("block_scheme.block_sums", replica=r, n=s.n):
            sums = bl.block_sums(s, prov)
        x = prov.plain(np.arange(s.n))
        S = np.concatenate([[0.0], np.cumsum(x)])
        return sums, float(S[s.n]), lil_ratio(S, 1.0, s.n), x[:head]

    out = pool_map(work, range(cfg.replicas), threads)
    sums = [o[0] for o in out]
    Sn = np.array([o[1] for o in out])
    if cfg.c2 is not None:
        c2, c2_se, c2_src = cfg.c2, 0.0, "config"
    else:
        with step("observables.c2_estimate", replicas=cfg.replicas, length=head):
            est = ob.c2_estimate(np.array([o[3] for o in out]), "covariance_series", mean=0.0)
        c2, c2_se, c2_src = est.c2, est.stderr, "covariance_series"
    with step("block_scheme.asip_probe", replicas=cfg.replicas, c2=c2):
        pr = bl.asip_probe(s, sums, c2)
    with step("stat_fit.ks_normal_test", samples=len(Sn)):
        ks, pval = ks_normal_test(Sn / math.sqrt(s.n), 0.0, math.sqrt(c2))
    # lil_ratio is homogeneous: ratio(S, c2) = ratio(S, 1) / sqrt(c2)
    lil = np.array([o[2] for o in out]) / math.sqrt(c2)
    res = {"labeled_heuristic": True, "schedule": s.to_dict(), "warnings": warn,
           "c2_hat": c2, "c2_stderr": c2_se, "c2_source": c2_src,
           "a": pr.a, "a_ci": list(pr.a_ci), "C": pr.C, "alpha": s.alpha,
           "a_bound": s.alpha + 1.0, "a_within_bound": pr.a <= s.alpha + 1.0,
           "fit": pr.fit.to_dict(), "skipped_blocks": pr.skipped,
           "clt_ks_statistic": ks, "clt_ks_pvalue": pval,
           "lil_median": float(np.median(lil)), "lil_quartiles":
           [float(np.quantile(lil, 0.25)), float(np.quantile(lil, 0.75))]}
    rows = [(int(n), float(a), float(b)) for n, a, b in zip(pr.grid, pr.D_median, pr.D_q90)]
    return Report("asip_probe", cfg.model_dump(mode="json"), ["n", "D_median", "D_q90"], rows,
                  res, _seeds(cfg, "probe"))


RUNNERS = {
    "map_tails": run_map_tails,
    "map_verify": run_map_verify,
    "tower_meeting": run_tower_meeting,
    "delta_decay": run_delta_decay,
    "covariance": run_covariance,
    "variance": run_variance,
    "blocks_schedule": run_blocks_schedule,
    "blocks_gap": run_blocks_gap,
    "block_variance": run_block_variance,
    "asip_probe": run_asip_probe,
}

assert tuple(RUNNERS) == cf.EXPERIMENTS


def run_experiment(cfg, threads: int = 1) -> Report:
    return RUNNERS[cfg.experiment](cfg, threads)
