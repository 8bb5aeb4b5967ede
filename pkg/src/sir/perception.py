"""Blind multi-level sensing: threshold detectors, blind mixture fitters and
level-sequence prediction over window energy statistics.

A window statistic under level l is modelled N(sigma^2 + P_l, (sigma^2 + P_l)^2 / n)
(Gaussian approximation of the exact Gamma law; exact for the threshold algebra).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import toml
from scipy.stats import norm

try:
    from numba import njit as _numba_njit

    def _jit(fn):
        return _numba_njit(cache=True)(fn)
except Exception:  # pragma: no cover - numba is a hard dependency in practice
    def _jit(fn):
        return fn

__all__ = [
    "GmmFit",
    "DpFit",
    "HmmEmFit",
    "DwellModel",
    "LevelPrediction",
    "energy_threshold",
    "level_thresholds",
    "classify_levels",
    "fit_dp_mixture",
    "fit_em_mixture",
    "fit_em_hmm",
    "fit_mean_shift",
    "posterior_labels",
    "estimate_dwell",
    "transition_matrix",
    "predict_level",
    "predict_sequence",
    "level_accuracy",
    "canonical_ranks",
    "oracle_fit",
    "save_fit_toml",
    "load_fit_toml",
    "save_trace_csv",
]

_VAR_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# result types


@dataclass(frozen=True)
class GmmFit:
    """Gaussian mixture summary with components sorted by ascending mean."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: float = float("nan")

    @property
    def k(self) -> int:
        return int(self.means.shape[0])

    def __post_init__(self):
        w = np.asarray(self.weights, float)
        m = np.asarray(self.means, float)
        v = np.asarray(self.variances, float)
        if not (w.shape == m.shape == v.shape) or w.ndim != 1 or w.size == 0:
            raise ValueError("weights, means, variances must be equal-length 1-d arrays")
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        if np.any(np.diff(m) <= 0):
            raise ValueError("means must be strictly ascending")
        if abs(w.sum() - 1.0) > 1e-6 or np.any(w < 0):
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)


@dataclass(frozen=True)
class DwellModel:
    """Per-level geometric run model: continuation probability in [0, 1)
    (termination probability in (0, 1]); mean dwell = 1 / (1 - continuation)."""

    continuation: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.continuation, float)
        if np.any(c < 0) or np.any(c >= 1.0):
            raise ValueError("continuation probabilities must lie in [0, 1)")
        object.__setattr__(self, "continuation", c)

    @property
    def mean_dwell(self) -> np.ndarray:
        return 1.0 / (1.0 - self.continuation)


@dataclass(frozen=True)
class DpFit:
    """Nonparametric mixture fit: mixture summary plus per-sample assignments,
    fitted concentration, dwell model, and the sweep-wise component-count trace."""

    gmm: GmmFit
    assignments: np.ndarray
    alpha: float
    dwell: DwellModel
    k_trace: np.ndarray
    burnin: int

    @property
    def k(self) -> int:
        return self.gmm.k


@dataclass(frozen=True)
class HmmEmFit:
    """Known-size temporal mixture fit (EM over a Gaussian-emission chain)."""

    gmm: GmmFit
    transmat: np.ndarray
    labels: np.ndarray
    loglik: float

    @property
    def k(self) -> int:
        return self.gmm.k


@dataclass(frozen=True)
class LevelPrediction:
    level: int
    posterior: np.ndarray


# ---------------------------------------------------------------------------
# threshold detectors


def energy_threshold(pfa: float, noise_var: float, n: int) -> float:
    """Constant-false-alarm threshold on the window statistic:
    theta = sigma^2 * (1 + Qinv(pfa) / sqrt(n))."""
    if not 0.0 < pfa < 1.0:
        raise ValueError("pfa must lie in (0, 1)")
    if noise_var <= 0 or n < 1:
        raise ValueError("noise_var must be > 0 and n >= 1")
    return float(noise_var * (1.0 + norm.isf(pfa) / math.sqrt(n)))


def level_thresholds(powers, priors, noise_var: float, n: int,
                     variances=None) -> np.ndarray:
    """Decision boundaries between adjacent level hypotheses, weighted by priors.

    Hypothesis l has mean sigma^2 + P_l and variance (sigma^2 + P_l)^2 / n unless
    an explicit variance override is given.  Each boundary is the root of the
    quadratic posterior log-ratio lying between the two adjacent means.
    """
    p = np.asarray(powers, float)
    w = np.asarray(priors, float)
    if p.size < 2:
        raise ValueError("need at least two levels")
    if p.size != w.size:
        raise ValueError("powers and priors must have equal length")
    order = np.argsort(p, kind="stable")
    means = noise_var + p[order]
    wts = w[order]
    if variances is None:
        vs = means ** 2 / n
    else:
        vs = np.asarray(variances, float)[order]
    out = np.empty(p.size - 1)
    for i in range(p.size - 1):
        out[i] = _pairwise_boundary(means[i], vs[i], wts[i], means[i + 1], vs[i + 1], wts[i + 1])
    if np.any(np.diff(out) <= 0):
        raise ValueError("thresholds did not come out strictly ascending")
    return out


def _pairwise_boundary(m1, v1, w1, m2, v2, w2) -> float:
    # log w1 N(x; m1, v1) = log w2 N(x; m2, v2)
    c0 = m1 * m1 / v1 - m2 * m2 / v2 - 2.0 * math.log(w1 / w2) - math.log(v2 / v1)
    c1 = -2.0 * (m1 / v1 - m2 / v2)
    c2 = 1.0 / v1 - 1.0 / v2
    if abs(c2) < 1e-18 * (1.0 / v1):
        if c1 == 0.0:
            raise ValueError("degenerate pair: identical hypotheses")
        return -c0 / c1
    disc = c1 * c1 - 4.0 * c2 * c0
    if disc < 0:
        raise ValueError("no real boundary between adjacent levels")
    r = math.sqrt(disc)
    roots = ((-c1 - r) / (2.0 * c2), (-c1 + r) / (2.0 * c2))
    inside = [x for x in roots if m1 <= x <= m2]
    if inside:
        return float(inside[0] if len(inside) == 1 else min(inside, key=lambda x: abs(x - 0.5 * (m1 + m2))))
    # fall back to the root nearest the midpoint (extreme priors can push it out)
    return float(min(roots, key=lambda x: abs(x - 0.5 * (m1 + m2))))


def classify_levels(values, thresholds) -> np.ndarray:
    """Map statistics to level indices by threshold comparison.  A value equal
    to a boundary goes to the lower level."""
    th = np.asarray(thresholds, float)
    return np.searchsorted(th, np.asarray(values, float), side="left").astype(np.int64)


# ---------------------------------------------------------------------------
# collapsed Gibbs sampler for the nonparametric mixture

# Normal-Inverse-Gamma base measure; posterior-predictive Student-t density.


@_jit
def _t_logpdf(x, m, kap, a, b):
    scale2 = b * (kap + 1.0) / (a * kap)
    nu = 2.0 * a
    z2 = (x - m) * (x - m) / (nu * scale2)
    return (math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu)
            - 0.5 * math.log(nu * math.pi * scale2)
            - 0.5 * (nu + 1.0) * math.log1p(z2))


@_jit
def _dp_sweep(x, z, cnt, s1, s2, q, alpha, m0, k0, a0, b0, u):
    """One in-place Gibbs sweep.  The assignment prior carries a self-transition
    factor: q * [k = neighbour] + (1 - q) * CRP(counts, alpha) on both sides, so
    temporally persistent levels are favoured; with q near the level marginals the
    sampler behaves like a plain exchangeable-mixture sampler."""
    T = x.shape[0]
    KMAX = cnt.shape[0]
    logp = np.empty(KMAX + 1)
    idx = np.empty(KMAX + 1, dtype=np.int64)
    tot = float(T - 1)
    log_1mq = math.log(1.0 - q)
    log_alpha = math.log(alpha)
    for t in range(T):
        xt = x[t]
        kold = z[t]
        cnt[kold] -= 1
        s1[kold] -= xt
        s2[kold] -= xt * xt
        zl = z[t - 1] if t > 0 else -1
        zr = z[t + 1] if t < T - 1 else -1
        crp_den = math.log(tot + alpha)
        if zr >= 0:
            log_pi_zr = math.log(float(cnt[zr])) - crp_den
        else:
            log_pi_zr = 0.0
        m = 0
        best = -1.0e300
        n_active = 0
        for k in range(KMAX):
            ck = cnt[k]
            if ck <= 0:
                continue
            n_active += 1
            ckf = float(ck)
            kap = k0 + ckf
            mn = (k0 * m0 + s1[k]) / kap
            an = a0 + 0.5 * ckf
            bn = b0 + 0.5 * (s2[k] + k0 * m0 * m0 - kap * mn * mn)
            if bn < 1e-300:
                bn = 1e-300
            v = _t_logpdf(xt, mn, kap, an, bn)
            if zl < 0:
                v += math.log(ckf) - crp_den
            elif k == zl:
                v += math.log(q + (1.0 - q) * ckf / (tot + alpha))
            else:
                v += log_1mq + math.log(ckf) - crp_den
            if zr >= 0:
                if k == zr:
                    v += math.log(q + (1.0 - q) * math.exp(log_pi_zr))
                else:
                    v += log_1mq + log_pi_zr
            logp[m] = v
            idx[m] = k
            if v > best:
                best = v
            m += 1
        if n_active < KMAX:
            v = _t_logpdf(xt, m0, k0, a0, b0)
            if zl < 0:
                v += log_alpha - crp_den
            else:
                v += log_1mq + log_alpha - crp_den
            if zr >= 0:
                v += log_1mq + log_pi_zr
            logp[m] = v
            idx[m] = -1
            if v > best:
                best = v
            m += 1
        total = 0.0
        for j in range(m):
            logp[j] = math.exp(logp[j] - best)
            total += logp[j]
        r = u[t] * total
        acc = 0.0
        pick = m - 1
        for j in range(m):
            acc += logp[j]
            if r <= acc:
                pick = j
                break
        knew = idx[pick]
        if knew < 0:
            for k in range(KMAX):
                if cnt[k] == 0:
                    knew = k
                    break
        z[t] = knew
        cnt[knew] += 1
        s1[knew] += xt
        s2[knew] += xt * xt


@_jit
def _dp_block_sweep(x, z, cnt, s1, s2, q, alpha, m0, k0, a0, b0, u):
    """One pass of run-block moves: each maximal constant-label run is
    reassigned as a unit (sequential predictive over the block, sticky-CRP
    factors at the boundaries and inside it).  Single-site sweeps cannot move a
    whole run, so without this pass clusters can neither absorb a persistent
    satellite nor nucleate around a level the initialisation missed."""
    T = x.shape[0]
    KMAX = cnt.shape[0]
    logp = np.empty(KMAX + 1)
    idx = np.empty(KMAX + 1, dtype=np.int64)
    tot = float(T - 1)
    log_1mq = math.log(1.0 - q)
    crp_den = math.log(tot + alpha)
    t = 0
    ui = 0
    while t < T:
        kold = z[t]
        e = t + 1
        while e < T and z[e] == kold:
            e += 1
        r = e - t
        if 2 * r > T:
            # a block spanning most of the chain carries no contrast between
            # candidates; skip it so a one-cluster state is not absorbing
            t = e
            continue
        rs1 = 0.0
        rs2 = 0.0
        for j in range(t, e):
            rs1 += x[j]
            rs2 += x[j] * x[j]
        cnt[kold] -= r
        s1[kold] -= rs1
        s2[kold] -= rs2
        zl = z[t - 1] if t > 0 else -1
        zr = z[e] if e < T else -1
        m = 0
        best = -1.0e300
        n_active = 0
        for k in range(KMAX):
            if cnt[k] <= 0:
                continue
            n_active += 1
            n = float(cnt[k])
            a = s1[k]
            b2 = s2[k]
            v = 0.0
            for j in range(t, e):
                kap = k0 + n
                mnk = (k0 * m0 + a) / kap
                an = a0 + 0.5 * n
                bn = b0 + 0.5 * (b2 + k0 * m0 * m0 - kap * mnk * mnk)
                if bn < 1e-300:
                    bn = 1e-300
                v += _t_logpdf(x[j], mnk, kap, an, bn)
                if j > t:
                    v += math.log(q + (1.0 - q) * n / (tot + alpha))
                elif zl < 0:
                    v += math.log(n) - crp_den
                elif k == zl:
                    v += math.log(q + (1.0 - q) * n / (tot + alpha))
                else:
                    v += log_1mq + math.log(n) - crp_den
                n += 1.0
                a += x[j]
                b2 += x[j] * x[j]
            if zr >= 0:
                if k == zr:
                    v += math.log(q + (1.0 - q) * float(cnt[zr]) / (tot + alpha))
                else:
                    v += log_1mq + math.log(float(cnt[zr])) - crp_den
            logp[m] = v
            idx[m] = k
            if v > best:
                best = v
            m += 1
        if n_active < KMAX:
            n = 0.0
            a = 0.0
            b2 = 0.0
            v = 0.0
            for j in range(t, e):
                if n == 0.0:
                    v += _t_logpdf(x[j], m0, k0, a0, b0)
                    if zl < 0:
                        v += math.log(alpha) - crp_den
                    else:
                        v += log_1mq + math.log(alpha) - crp_den
                else:
                    kap = k0 + n
                    mnk = (k0 * m0 + a) / kap
                    an = a0 + 0.5 * n
                    bn = b0 + 0.5 * (b2 + k0 * m0 * m0 - kap * mnk * mnk)
                    if bn < 1e-300:
                        bn = 1e-300
                    v += _t_logpdf(x[j], mnk, kap, an, bn)
                    v += math.log(q + (1.0 - q) * n / (tot + alpha))
                n += 1.0
                a += x[j]
                b2 += x[j] * x[j]
            if zr >= 0:
                v += log_1mq + math.log(float(cnt[zr])) - crp_den
            logp[m] = v
            idx[m] = -1
            if v > best:
                best = v
            m += 1
        totp = 0.0
        for jj in range(m):
            logp[jj] = math.exp(logp[jj] - best)
            totp += logp[jj]
        rr = u[ui] * totp
        ui += 1
        acc = 0.0
        pick = m - 1
        for jj in range(m):
            acc += logp[jj]
            if rr <= acc:
                pick = jj
                break
        knew = idx[pick]
        if knew < 0:
            for k in range(KMAX):
                if cnt[k] == 0:
                    knew = k
                    break
        for j in range(t, e):
            z[j] = knew
        cnt[knew] += r
        s1[knew] += rs1
        s2[knew] += rs2
        t = e


def fit_dp_mixture(samples, rng: np.random.Generator | None = None,
                   sweeps: int = 300, burnin: int = 150,
                   prune_weight: float = 0.01, kmax: int = 50,
                   merge_slack: float = 1.0) -> DpFit:
    """Collapsed Gibbs for a nonparametric univariate Gaussian mixture.

    Normal-Inverse-Gamma base measure set empirically from the data (location =
    sample mean, scale = sample variance, unit pseudo-counts); Gamma(1,1)
    hyperprior on the concentration, resampled every sweep; self-transition
    weight resampled every sweep from the current labels.

    Labels start from a coarse temporal pre-segmentation (an 8-state chain-EM
    pass) because single-site sweeps cannot nucleate a cluster inside a long
    run.  Each sweep adds a pass of run-block moves (whole constant-label runs
    reassigned jointly) so satellites can be absorbed and missed levels can
    nucleate.  The final-sweep assignments are pruned below ``prune_weight``
    and consolidated: adjacent components merge while the merge costs less than
    ``merge_slack`` nats of chain likelihood (the sampler's run-jitter
    satellites are likelihood-neutral to merge; distinct levels are not).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x = np.asarray(samples, float).ravel()
    if x.size < 50:
        raise ValueError(f"need at least 50 samples to fit, got {x.size}")
    if not np.isfinite(x).all():
        raise ValueError("samples must be finite")
    if sweeps < 1 or burnin < 0 or burnin >= sweeps:
        raise ValueError("need sweeps >= 1 and 0 <= burnin < sweeps")
    T = x.size
    m0 = float(x.mean())
    b0 = float(x.var())
    if b0 <= 0.0:
        b0 = _VAR_FLOOR * (1.0 + m0 * m0)
    k0 = 1.0
    a0 = 1.0

    kinit = int(min(8, np.unique(x).size))
    if kinit > 1:
        pre = fit_em_hmm(x, kinit, rng=rng, restarts=2, iters=60)
        z = pre.labels.astype(np.int64).copy()
    else:
        z = np.zeros(T, dtype=np.int64)
    cnt = np.zeros(kmax, dtype=np.int64)
    s1 = np.zeros(kmax)
    s2 = np.zeros(kmax)
    np.add.at(cnt, z, 1)
    np.add.at(s1, z, x)
    np.add.at(s2, z, x * x)

    q = 0.5
    alpha = 1.0
    k_trace = np.empty(sweeps, dtype=np.int64)
    block_start = min(20, burnin)
    for s in range(sweeps):
        u = rng.random(T)
        _dp_sweep(x, z, cnt, s1, s2, q, alpha, m0, k0, a0, b0, u)
        if s >= block_start:
            # run-block moves only once q has settled: early on, segments are
            # not yet aligned with dwell runs and the count prior dominates the
            # weak likelihood contrast, eroding structure that never returns
            u = rng.random(T)
            _dp_block_sweep(x, z, cnt, s1, s2, q, alpha, m0, k0, a0, b0, u)
        c = int(np.count_nonzero(z[1:] == z[:-1]))
        q = float(rng.beta(1.0 + c, 1.0 + (T - 1 - c)))
        q = min(max(q, 1e-6), 1.0 - 1e-6)
        kact = int(np.count_nonzero(cnt > 0))
        # Escobar-West concentration update under Gamma(1,1)
        eta = float(rng.beta(alpha + 1.0, T))
        rate = 1.0 - math.log(eta)
        odds = kact / (T * rate)
        shape = 1.0 + kact if rng.random() < odds / (1.0 + odds) else max(kact, 1.0)
        alpha = max(float(rng.gamma(shape, 1.0 / rate)), 1e-8)
        k_trace[s] = kact
    labels, mn, var, weights = _dp_summary(x, z, cnt, s1, s2, m0, k0, a0, b0)

    keep = weights >= prune_weight
    if not keep.any():
        keep[int(np.argmax(weights))] = True
    if not keep.all():
        kept_idx = np.flatnonzero(keep)
        logn = (np.log(np.maximum(weights[keep], 1e-300))
                - 0.5 * np.log(2.0 * np.pi * var[keep])
                - (x[:, None] - mn[keep]) ** 2 / (2.0 * var[keep]))
        nearest = kept_idx[np.argmax(logn, axis=1)]
        pruned = ~keep[labels]
        labels = labels.copy()
        labels[pruned] = nearest[pruned]
        mn, var = mn[keep], var[keep]
        new_id = -np.ones(keep.size, dtype=np.int64)
        new_id[kept_idx] = np.arange(kept_idx.size)
        labels = new_id[labels]
        weights = np.bincount(labels, minlength=mn.size).astype(float) / T

    labels, mn, var, weights = _consolidate(x, labels, mn, var, weights,
                                            merge_slack)
    ll = float(_mixture_loglik(x, weights, mn, var))
    gmm = GmmFit(weights=weights / weights.sum(), means=mn, variances=var,
                 log_likelihood=ll)
    dwell = estimate_dwell(labels, k=gmm.k)
    return DpFit(gmm=gmm, assignments=labels, alpha=float(alpha), dwell=dwell,
                 k_trace=k_trace, burnin=burnin)


def _dp_summary(x, z, cnt, s1, s2, m0, k0, a0, b0):
    """Posterior summary (labels relabeled in ascending-mean order) of the
    sampler's current state."""
    T = x.size
    active = np.flatnonzero(cnt > 0)
    ckf = cnt[active].astype(float)
    kap = k0 + ckf
    mn = (k0 * m0 + s1[active]) / kap
    an = a0 + 0.5 * ckf
    bn = b0 + 0.5 * (s2[active] + k0 * m0 * m0 - kap * mn * mn)
    bn = np.maximum(bn, 1e-300)
    var = np.where(an > 1.0, bn / np.maximum(an - 1.0, 0.5), bn / 0.5)
    var = np.maximum(var, _VAR_FLOOR * (1.0 + mn * mn))
    order = np.argsort(mn, kind="stable")
    relabel = np.empty(cnt.size, dtype=np.int64)
    relabel[active[order]] = np.arange(active.size)
    return relabel[z], mn[order], var[order], ckf[order] / T


def _mixture_loglik(x: np.ndarray, w: np.ndarray, mu: np.ndarray,
                    var: np.ndarray) -> float:
    logr = (np.log(np.maximum(w, 1e-300))
            - 0.5 * np.log(2.0 * np.pi * var)
            - (x[:, None] - mu) ** 2 / (2.0 * var))
    mx = logr.max(axis=1, keepdims=True)
    return float(np.sum(np.log(np.exp(logr - mx).sum(axis=1)) + mx.ravel()))


def _chain_loglik(x: np.ndarray, labels: np.ndarray, mu: np.ndarray,
                  var: np.ndarray, w: np.ndarray) -> float:
    dwell = estimate_dwell(labels, k=mu.size)
    trans = transition_matrix(dwell, w)
    _, _, ll = _hmm_fb(_gaussian_loglik(x, mu, var), w / w.sum(), trans)
    return float(ll)


def _consolidate(x: np.ndarray, labels: np.ndarray, mu: np.ndarray,
                 var: np.ndarray, w: np.ndarray, merge_slack: float = 1.0):
    """Greedy merge of adjacent components while the merge is near-neutral in
    dwell-aware chain likelihood (loses less than ``merge_slack`` nats).

    The self-transition prior lets the sampler split one persistent level into
    run-specific satellites (run means jitter by sigma/sqrt(dwell)); merging
    those is likelihood-neutral, while merging genuinely distinct levels costs
    many nats.  Deterministic.
    """
    T = x.size
    while mu.size > 1:
        base = _chain_loglik(x, labels, mu, var, w)
        best_gain = -merge_slack
        best = None
        for i in range(mu.size - 1):
            mask = (labels == i) | (labels == i + 1)
            pts = x[mask]
            m = float(pts.mean())
            v = max(float(pts.var()), _VAR_FLOOR * (1.0 + m * m))
            mu2 = np.concatenate((mu[:i], [m], mu[i + 2:]))
            var2 = np.concatenate((var[:i], [v], var[i + 2:]))
            lab2 = labels.copy()
            lab2[lab2 == i + 1] = i
            lab2[lab2 > i + 1] -= 1
            w2 = np.bincount(lab2, minlength=mu2.size).astype(float) / T
            gain = _chain_loglik(x, lab2, mu2, var2, w2) - base
            if gain > best_gain:
                best_gain = gain
                best = (lab2, mu2, var2, w2)
        if best is None:
            break
        labels, mu, var, w = best
    return labels, mu, var, w


# ---------------------------------------------------------------------------
# known-size fitters


def _farthest_point_means(x: np.ndarray, k: int, first: int) -> np.ndarray:
    chosen = [x[first]]
    for _ in range(1, k):
        d = np.min(np.abs(x[:, None] - np.asarray(chosen)), axis=1)
        chosen.append(x[int(np.argmax(d))])
    return np.sort(np.asarray(chosen))


def _em_once(x: np.ndarray, mu: np.ndarray, var: np.ndarray, w: np.ndarray,
             iters: int, tol: float):
    n = x.size
    floor = _VAR_FLOOR * (1.0 + float(np.mean(x * x)))
    ll_prev = -np.inf
    ll_hist = []
    for _ in range(iters):
        logr = (np.log(np.maximum(w, 1e-300))
                - 0.5 * np.log(2.0 * np.pi * var)
                - (x[:, None] - mu) ** 2 / (2.0 * var))
        mx = logr.max(axis=1, keepdims=True)
        r = np.exp(logr - mx)
        s = r.sum(axis=1, keepdims=True)
        ll = float(np.sum(np.log(s) + mx))
        ll_hist.append(ll)
        r /= s
        nk = r.sum(axis=0)
        nz = np.maximum(nk, 1e-12)
        mu = (r * x[:, None]).sum(axis=0) / nz
        var = (r * (x[:, None] - mu) ** 2).sum(axis=0) / nz
        var = np.maximum(var, floor)
        w = nk / n
        if ll - ll_prev < tol * (1.0 + abs(ll)) and len(ll_hist) > 1:
            break
        ll_prev = ll
    return mu, var, w, ll_hist


def fit_em_mixture(samples, n_components: int,
                   rng: np.random.Generator | None = None,
                   restarts: int = 4, iters: int = 200,
                   tol: float = 1e-10):
    """Expectation-maximisation for a fixed-size univariate Gaussian mixture.

    Farthest-point initialisation (first restart seeded at the sample nearest the
    median, later restarts at random samples); best restart by final
    log-likelihood.  Returns (GmmFit, log-likelihood history of the winner).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x = np.asarray(samples, float).ravel()
    k = int(n_components)
    if k < 1:
        raise ValueError("n_components must be >= 1")
    if x.size < k:
        raise ValueError("need at least n_components samples")
    if not np.isfinite(x).all():
        raise ValueError("samples must be finite")
    var0 = max(float(x.var()) / max(k * k, 1), _VAR_FLOOR * (1.0 + float(np.mean(x * x))))
    best = None
    for r in range(max(restarts, 1)):
        if r == 0:
            first = int(np.argmin(np.abs(x - np.median(x))))
        else:
            first = int(rng.integers(x.size))
        mu = _farthest_point_means(x, k, first).astype(float)
        mu, var, w, ll_hist = _em_once(x, mu, np.full(k, var0), np.full(k, 1.0 / k),
                                       iters, tol)
        if best is None or ll_hist[-1] > best[3][-1]:
            best = (mu, var, w, ll_hist)
    mu, var, w, ll_hist = best
    order = np.argsort(mu, kind="stable")
    mu, var, w = mu[order], var[order], w[order]
    # strictly ascending means: merge numerically identical components
    scale = 1.0 + abs(float(np.mean(x)))
    keep_mu, keep_var, keep_w = [mu[0]], [var[0]], [w[0]]
    for j in range(1, k):
        if mu[j] - keep_mu[-1] <= 1e-12 * scale:
            tw = keep_w[-1] + w[j]
            if tw > 0:
                keep_mu[-1] = (keep_mu[-1] * keep_w[-1] + mu[j] * w[j]) / tw
                keep_var[-1] = max(keep_var[-1], var[j])
            keep_w[-1] = tw
        else:
            keep_mu.append(mu[j])
            keep_var.append(var[j])
            keep_w.append(w[j])
    w = np.asarray(keep_w)
    mu = np.asarray(keep_mu)
    var = np.asarray(keep_var)
    w = w / w.sum()
    fit = GmmFit(weights=w, means=mu, variances=var,
                 log_likelihood=_mixture_loglik(x, w, mu, var))
    return fit, np.asarray(ll_hist)


@_jit
def _hmm_fb(logb, init, trans):
    """Scaled forward-backward.  Returns (gamma, xi_sums, loglik)."""
    T, K = logb.shape
    alpha = np.empty((T, K))
    c = np.empty(T)
    mx = np.empty(T)
    for t in range(T):
        m = -1.0e300
        for k in range(K):
            if logb[t, k] > m:
                m = logb[t, k]
        mx[t] = m
    s = 0.0
    for k in range(K):
        alpha[0, k] = init[k] * math.exp(logb[0, k] - mx[0])
        s += alpha[0, k]
    c[0] = s
    for k in range(K):
        alpha[0, k] /= s
    for t in range(1, T):
        s = 0.0
        for k in range(K):
            a = 0.0
            for j in range(K):
                a += alpha[t - 1, j] * trans[j, k]
            a *= math.exp(logb[t, k] - mx[t])
            alpha[t, k] = a
            s += a
        c[t] = s
        for k in range(K):
            alpha[t, k] /= s
    gamma = np.empty((T, K))
    xi = np.zeros((K, K))
    beta = np.ones(K)
    for k in range(K):
        gamma[T - 1, k] = alpha[T - 1, k]
    for t in range(T - 2, -1, -1):
        ebeta = np.empty(K)
        for k in range(K):
            ebeta[k] = math.exp(logb[t + 1, k] - mx[t + 1]) * beta[k]
        zsum = 0.0
        for j in range(K):
            for k in range(K):
                zsum += alpha[t, j] * trans[j, k] * ebeta[k]
        for j in range(K):
            for k in range(K):
                xi[j, k] += alpha[t, j] * trans[j, k] * ebeta[k] / zsum
        nb = np.empty(K)
        for j in range(K):
            b = 0.0
            for k in range(K):
                b += trans[j, k] * ebeta[k]
            nb[j] = b / c[t + 1]
        beta = nb
        s = 0.0
        for k in range(K):
            g = alpha[t, k] * beta[k]
            gamma[t, k] = g
            s += g
        for k in range(K):
            gamma[t, k] /= s
    ll = 0.0
    for t in range(T):
        ll += math.log(c[t]) + mx[t]
    return gamma, xi, ll


def _gaussian_loglik(x: np.ndarray, mu: np.ndarray, var: np.ndarray) -> np.ndarray:
    return (-0.5 * np.log(2.0 * np.pi * var)
            - (x[:, None] - mu) ** 2 / (2.0 * var))


def fit_em_hmm(samples, n_states: int, rng: np.random.Generator | None = None,
               restarts: int = 4, iters: int = 100, tol: float = 1e-9) -> HmmEmFit:
    """EM (Baum-Welch) for a fixed-size Gaussian-emission chain over the window
    sequence: the temporal counterpart of the fixed-size mixture for data with
    dwell structure.  Best restart by final log-likelihood; labels are the
    smoothed per-slot maximum-posterior states.

    Restart inits: marginal quantiles, the marginal-mixture EM means (reliable
    when components are separated), paired duplicates (competitive when they
    are not), then random samples.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    x = np.asarray(samples, float).ravel()
    K = int(n_states)
    if K < 1 or x.size < K:
        raise ValueError("need n_states >= 1 and at least that many samples")
    if not np.isfinite(x).all():
        raise ValueError("samples must be finite")
    floor = _VAR_FLOOR * (1.0 + float(np.mean(x * x)))
    best = None
    qs = np.linspace(0.0, 1.0, K + 2)[1:-1]
    for r in range(max(restarts, 1)):
        if r == 0:
            mu = np.quantile(x, qs)
        elif r == 1:
            marg, _ = fit_em_mixture(x, K, rng=rng, restarts=1, iters=100)
            mu = marg.means.copy()
            if mu.size < K:
                mu = np.concatenate((mu, np.quantile(x, qs)[: K - mu.size]))
                mu.sort()
        elif r == 2 and K > 1:
            # paired-duplicate start: lets EM keep near-duplicate states when
            # the likelihood genuinely prefers fewer distinct means
            half = (K + 1) // 2
            base = np.quantile(x, np.linspace(0.0, 1.0, half + 2)[1:-1])
            eps = 1e-3 * (float(np.std(x)) + 1e-30)
            mu = np.sort(np.concatenate((base - eps, base + eps))[:K])
        else:
            mu = np.sort(rng.choice(x, size=K, replace=False))
        mu = mu.astype(float)
        var = np.full(K, max(float(x.var()) / max(K, 1), floor))
        trans = np.full((K, K), 0.1 / max(K - 1, 1))
        np.fill_diagonal(trans, 0.9 if K > 1 else 1.0)
        trans /= trans.sum(axis=1, keepdims=True)
        init = np.full(K, 1.0 / K)
        ll_prev = -np.inf
        ll = ll_prev
        for _ in range(iters):
            gamma, xi, ll = _hmm_fb(_gaussian_loglik(x, mu, var), init, trans)
            if ll - ll_prev < tol * (1.0 + abs(ll)) and ll_prev != -np.inf:
                break
            ll_prev = ll
            nk = gamma.sum(axis=0)
            nz = np.maximum(nk, 1e-12)
            mu = (gamma * x[:, None]).sum(axis=0) / nz
            var = np.maximum((gamma * (x[:, None] - mu) ** 2).sum(axis=0) / nz, floor)
            rows = xi.sum(axis=1, keepdims=True)
            trans = np.where(rows > 1e-12, xi / np.maximum(rows, 1e-12), 1.0 / K)
            trans = np.maximum(trans, 1e-12)
            trans /= trans.sum(axis=1, keepdims=True)
            init = np.maximum(gamma[0], 1e-12)
            init /= init.sum()
        if best is None or ll > best[0]:
            best = (ll, mu, var, trans, init)
    ll, mu, var, trans, init = best
    order = np.argsort(mu, kind="stable")
    mu, var = mu[order], var[order]
    trans = trans[np.ix_(order, order)]
    gamma, _, _ = _hmm_fb(_gaussian_loglik(x, mu, var), init[order], trans)
    labels = np.argmax(gamma, axis=1).astype(np.int64)
    occ = gamma.mean(axis=0)
    # strictly-ascending guard: nudge exact duplicates apart by a relative epsilon
    scale = 1.0 + abs(float(np.mean(x)))
    for j in range(1, K):
        if mu[j] <= mu[j - 1]:
            mu[j] = mu[j - 1] + 1e-9 * scale
    gmm = GmmFit(weights=occ / occ.sum(), means=mu, variances=var,
                 log_likelihood=float(ll))
    return HmmEmFit(gmm=gmm, transmat=trans, labels=labels, loglik=float(ll))


# ---------------------------------------------------------------------------
# mode finding


def silverman_bandwidth(x: np.ndarray) -> float:
    sd = float(np.std(x))
    q75, q25 = np.percentile(x, [75.0, 25.0])
    iqr = float(q75 - q25) / 1.34
    a = min(sd, iqr) if iqr > 0 else sd
    if a <= 0:
        a = 1e-9 * (1.0 + abs(float(np.mean(x))))
    return 0.9 * a * x.size ** (-0.2)


def fit_mean_shift(samples, bandwidth: float | None = None, max_iter: int = 500,
                   grid_size: int = 2048):
    """Gaussian-kernel mean-shift mode finding.

    Candidate modes are the local maxima of the kernel density on a fine grid,
    each refined by mean-shift iterations to convergence; modes closer than half
    the bandwidth are merged.  Returns (GmmFit, modes array); component weights,
    means and variances summarise the nearest-mode clusters.  Deterministic.
    """
    x = np.asarray(samples, float).ravel()
    if x.size < 1:
        raise ValueError("need at least one sample")
    if not np.isfinite(x).all():
        raise ValueError("samples must be finite")
    h = float(bandwidth) if bandwidth is not None else silverman_bandwidth(x)
    if h <= 0:
        raise ValueError("bandwidth must be > 0")
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-15 * (1.0 + abs(lo)):
        modes = np.array([lo])
    else:
        grid = np.linspace(lo, hi, grid_size)
        dens = np.exp(-0.5 * ((grid[:, None] - x) / h) ** 2).sum(axis=1)
        peak = np.flatnonzero((dens >= np.roll(dens, 1)) & (dens >= np.roll(dens, -1)))
        peak = peak[(peak > 0) & (peak < grid_size - 1)]
        if dens[0] > dens[1]:
            peak = np.concatenate(([0], peak))
        if dens[-1] > dens[-2]:
            peak = np.concatenate((peak, [grid_size - 1]))
        y = grid[peak].astype(float)
        for _ in range(max_iter):
            wgt = np.exp(-0.5 * ((y[:, None] - x) / h) ** 2)
            ynew = (wgt * x).sum(axis=1) / np.maximum(wgt.sum(axis=1), 1e-300)
            if np.max(np.abs(ynew - y)) < 1e-10 * h:
                y = ynew
                break
            y = ynew
        modes = np.sort(y)
        merged = [modes[0]]
        for mval in modes[1:]:
            if mval - merged[-1] < 0.5 * h:
                merged[-1] = 0.5 * (merged[-1] + mval)
            else:
                merged.append(mval)
        modes = np.asarray(merged)
    lab = np.argmin(np.abs(x[:, None] - modes), axis=1)
    k = modes.size
    w = np.bincount(lab, minlength=k).astype(float)
    mu = np.empty(k)
    var = np.empty(k)
    for j in range(k):
        pts = x[lab == j]
        mu[j] = pts.mean() if pts.size else modes[j]
        var[j] = max(pts.var() if pts.size else h * h, _VAR_FLOOR * (1.0 + mu[j] ** 2))
    keep = w > 0
    w, mu, var = w[keep], mu[keep], var[keep]
    order = np.argsort(mu, kind="stable")
    mu, var, w = mu[order], var[order], w[order]
    for j in range(1, mu.size):
        if mu[j] <= mu[j - 1]:
            mu[j] = mu[j - 1] + 1e-12 * (1.0 + abs(mu[j - 1]))
    w = w / w.sum()
    fit = GmmFit(weights=w, means=mu, variances=var,
                 log_likelihood=_mixture_loglik(x, w, mu, var))
    return fit, modes


# ---------------------------------------------------------------------------
# dwell inference and prediction


def posterior_labels(fit: GmmFit, samples) -> np.ndarray:
    x = np.asarray(samples, float).ravel()
    logr = (np.log(np.maximum(fit.weights, 1e-300))
            - 0.5 * np.log(2.0 * np.pi * fit.variances)
            - (x[:, None] - fit.means) ** 2 / (2.0 * fit.variances))
    return np.argmax(logr, axis=1).astype(np.int64)


def estimate_dwell(labels, k: int | None = None) -> DwellModel:
    """Per-level continuation probability = within-run continuations divided by
    total slots at the level; the censored final run contributes its slots
    without a termination event (constant sequence of length T gives (T-1)/T,
    i.e. mean dwell T)."""
    z = np.asarray(labels, dtype=np.int64).ravel()
    if z.size < 1:
        raise ValueError("labels must be non-empty")
    kk = int(k) if k is not None else int(z.max()) + 1
    if z.min() < 0 or z.max() >= kk:
        raise ValueError("labels out of range")
    n_l = np.bincount(z, minlength=kk).astype(float)
    starts = np.ones(z.size, dtype=bool)
    starts[1:] = z[1:] != z[:-1]
    runs_l = np.bincount(z[starts], minlength=kk).astype(float)
    cont = np.zeros(kk)
    occ = n_l > 0
    cont[occ] = (n_l[occ] - runs_l[occ]) / n_l[occ]
    return DwellModel(continuation=np.clip(cont, 0.0, 1.0 - 1e-12))


def transition_matrix(dwell: DwellModel, weights) -> np.ndarray:
    """One-step level prior: stay with the continuation probability, otherwise
    renew from the stationary weights (which may re-select the same level)."""
    w = np.asarray(weights, float)
    w = w / w.sum()
    q = dwell.continuation
    if q.shape[0] != w.shape[0]:
        raise ValueError("dwell model and weights disagree on level count")
    return q[:, None] * np.eye(w.size) + (1.0 - q)[:, None] * w[None, :]


def _fit_gmm(fit) -> GmmFit:
    return fit.gmm if hasattr(fit, "gmm") else fit


def predict_level(fit, energy: float, prev: LevelPrediction | None = None,
                  dwell: DwellModel | None = None) -> LevelPrediction:
    """One-window posterior over levels: prior (component weights, or the
    one-step dwell-aware transition of ``prev`` when both are given) times the
    Gaussian likelihood of the statistic.  Ties take the lowest index."""
    if not math.isfinite(float(energy)):
        raise ValueError("energy must be finite")
    gmm = _fit_gmm(fit)
    if prev is not None and dwell is not None:
        prior = prev.posterior @ transition_matrix(dwell, gmm.weights)
    else:
        prior = gmm.weights
    logp = (np.log(np.maximum(prior, 1e-300))
            - 0.5 * np.log(2.0 * np.pi * gmm.variances)
            - (float(energy) - gmm.means) ** 2 / (2.0 * gmm.variances))
    logp -= logp.max()
    post = np.exp(logp)
    post /= post.sum()
    return LevelPrediction(level=int(np.argmax(post)), posterior=post)


def predict_sequence(fit, energies, dwell: DwellModel | None = None,
                     smooth: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Level prediction over a collected block of window statistics.

    Without a dwell model each window is classified independently.  With one,
    the dwell-aware transition prior is applied along the block: two-sided
    (forward-backward smoothing, the default for offline blocks) or causal
    (``smooth=False``).  Returns (labels, per-slot posteriors).
    """
    gmm = _fit_gmm(fit)
    x = np.asarray(energies, float).ravel()
    logb = _gaussian_loglik(x, gmm.means, gmm.variances)
    if dwell is None:
        logp = logb + np.log(np.maximum(gmm.weights, 1e-300))
        mx = logp.max(axis=1, keepdims=True)
        post = np.exp(logp - mx)
        post /= post.sum(axis=1, keepdims=True)
        return np.argmax(post, axis=1).astype(np.int64), post
    trans = transition_matrix(dwell, gmm.weights)
    init = gmm.weights
    if smooth:
        gamma, _, _ = _hmm_fb(logb, init, trans)
        post = gamma
    else:
        post = _hmm_filter(logb, init, trans)
    return np.argmax(post, axis=1).astype(np.int64), post


def _hmm_filter(logb: np.ndarray, init: np.ndarray, trans: np.ndarray) -> np.ndarray:
    T, K = logb.shape
    post = np.empty((T, K))
    mx = logb.max(axis=1)
    a = init * np.exp(logb[0] - mx[0])
    post[0] = a / a.sum()
    for t in range(1, T):
        a = (post[t - 1] @ trans) * np.exp(logb[t] - mx[t])
        post[t] = a / a.sum()
    return post


def level_accuracy(pred, true) -> float:
    """Fraction of exact per-slot matches between rank-aligned label sequences.
    Labels outside the other sequence's range simply never match."""
    p = np.asarray(pred, dtype=np.int64).ravel()
    t = np.asarray(true, dtype=np.int64).ravel()
    if p.shape != t.shape or p.size == 0:
        raise ValueError("prediction and truth must be equal-length and non-empty")
    return float(np.mean(p == t))


def canonical_ranks(values) -> np.ndarray:
    """Map values to their ascending rank (0 = smallest): the canonical label
    order used to align fitted components with true levels."""
    v = np.asarray(values, float)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.int64)
    ranks[order] = np.arange(v.size)
    return ranks


def oracle_fit(powers, priors, noise_var: float, n: int,
               mean_dwell: float | None = None) -> tuple[GmmFit, DwellModel | None]:
    """Truth-parameterised model for the known-model bound: component means
    sigma^2 + P_l with the matching variances and prior weights, plus the true
    dwell model when the mean dwell is known."""
    p = np.asarray(powers, float)
    w = np.asarray(priors, float)
    order = np.argsort(p, kind="stable")
    means = noise_var + p[order]
    var = means ** 2 / n
    gmm = GmmFit(weights=w[order] / w.sum(), means=means, variances=var)
    dwell = None
    if mean_dwell is not None:
        # continuation of the observed level process: stay if the dwell does not
        # terminate, or if it terminates and the renewal re-draws the same level
        q = (1.0 - 1.0 / mean_dwell) + (1.0 / mean_dwell) * gmm.weights
        dwell = DwellModel(continuation=np.clip(q, 0.0, 1.0 - 1e-12))
    return gmm, dwell


# ---------------------------------------------------------------------------
# serialization


def save_fit_toml(path, fit, dwell: DwellModel | None = None) -> None:
    gmm = _fit_gmm(fit)
    if dwell is None:
        dwell = getattr(fit, "dwell", None)
    doc = {
        "k": gmm.k,
        "weights": [float(v) for v in gmm.weights],
        "means": [float(v) for v in gmm.means],
        "variances": [float(v) for v in gmm.variances],
        "dwell_continuation": [float(v) for v in dwell.continuation] if dwell is not None else [],
    }
    with open(path, "w") as fh:
        fh.write(toml.dumps(doc))


def load_fit_toml(path) -> tuple[GmmFit, DwellModel | None]:
    import tomli

    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    gmm = GmmFit(weights=np.asarray(doc["weights"], float),
                 means=np.asarray(doc["means"], float),
                 variances=np.asarray(doc["variances"], float))
    if int(doc["k"]) != gmm.k:
        raise ValueError("fit file k disagrees with component arrays")
    dwell = None
    if doc.get("dwell_continuation"):
        dwell = DwellModel(continuation=np.asarray(doc["dwell_continuation"], float))
    return gmm, dwell


def save_trace_csv(path, true_levels, pred_levels, posteriors) -> None:
    t = np.asarray(true_levels, dtype=np.int64)
    p = np.asarray(pred_levels, dtype=np.int64)
    post = np.asarray(posteriors, float)
    if not (t.shape[0] == p.shape[0] == post.shape[0]):
        raise ValueError("trace arrays must share their slot dimension")
    header = ["slot", "true_level", "pred_level"] + [f"posterior{j}" for j in range(post.shape[1])]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for i in range(t.shape[0]):
            wr.writerow([i, int(t[i]), int(p[i])] + [repr(float(v)) for v in post[i]])
