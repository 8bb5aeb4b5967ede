"""Collaborative spectrum mapping from geo-tagged multi-channel energy samples.

Each secondary user contributes an ordered sequence of multi-channel energy
measurements along its track.  A shared-library sticky chain model clusters
the samples into spectrum states; cluster-head fits are fused into a global
state library; per-channel coverage disks come from the smallest circle
enclosing the samples occupied on that channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import toml
import tomli

from . import geometry

__all__ = [
    "StickyHmmFit",
    "SpectrumMap",
    "CoverageReport",
    "fit_sticky_hmm",
    "fuse_cluster_heads",
    "state_occupancy",
    "estimate_coverage",
    "coverage_error",
    "query_spectrum",
    "build_spectrum_map",
    "save_map_toml",
    "load_map_toml",
]

try:  # pragma: no cover - exercised implicitly by import
    from numba import njit as _njit

    def _jit(fn):
        return _njit(cache=True)(fn)
except Exception:  # pragma: no cover
    def _jit(fn):
        return fn


@dataclass(frozen=True)
class StickyHmmFit:
    """Shared-library chain fit over one or more sample sequences.

    ``means``/``variances`` are (k_active, n_channels); ``labels`` holds one
    int64 array per input sequence, entries in [0, k_active).
    """

    k_active: int
    transmat: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    labels: tuple[np.ndarray, ...]

    def __post_init__(self):
        if self.k_active < 1:
            raise ValueError("k_active must be >= 1")
        t = np.asarray(self.transmat, float)
        if t.shape != (self.k_active, self.k_active):
            raise ValueError("transmat shape must be (k_active, k_active)")
        if not np.allclose(t.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transmat rows must sum to 1 within 1e-9")
        if np.any(t < 0):
            raise ValueError("transmat entries must be >= 0")
        if self.means.shape != self.variances.shape or self.means.ndim != 2:
            raise ValueError("means and variances must be matching 2-d arrays")
        if self.means.shape[0] != self.k_active:
            raise ValueError("one mean vector per active state required")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be > 0")
        for lab in self.labels:
            if lab.size and (lab.min() < 0 or lab.max() >= self.k_active):
                raise ValueError("labels must reference active states")

    @property
    def n_channels(self) -> int:
        return self.means.shape[1]

    def counts(self) -> np.ndarray:
        c = np.zeros(self.k_active, dtype=np.int64)
        for lab in self.labels:
            np.add.at(c, lab, 1)
        return c


@dataclass(frozen=True)
class SpectrumMap:
    """Queryable spectrum summary: state occupancy plus per-channel coverage disks."""

    occupancy: np.ndarray  # (k, n_channels) int8
    circles: tuple[tuple[float, float, float, int], ...]  # (cx, cy, r, channel)
    area_km: tuple[float, float]

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 2:
            raise ValueError("occupancy must be (states, channels)")
        w, h = self.area_km
        if w <= 0 or h <= 0:
            raise ValueError("area_km entries must be > 0")
        for cx, cy, r, ch in self.circles:
            if r <= 0:
                raise ValueError("circle radius must be > 0")
            if not (0.0 <= cx <= w and 0.0 <= cy <= h):
                raise ValueError("circle center outside area")
            if ch < 0 or ch >= occ.shape[1]:
                raise ValueError("circle channel out of range")

    @property
    def n_channels(self) -> int:
        return int(np.asarray(self.occupancy).shape[1])


@dataclass(frozen=True)
class CoverageReport:
    """Estimated-vs-true coverage comparison.

    ``matches`` rows are (true index, estimate index, radius error fraction,
    center offset km); unmatched indices listed separately.
    """

    matches: tuple[tuple[int, int, float, float], ...]
    unmatched_true: tuple[int, ...]
    unmatched_est: tuple[int, ...]

    @property
    def mean_radius_error(self) -> float:
        if not self.matches:
            return float("nan")
        return float(np.mean([m[2] for m in self.matches]))


# ---------------------------------------------------------------------------
# blocked Gibbs for the truncated shared-library sticky chain


@_jit
def _ffbs(logb, log_init, log_trans, trans, u):
    """Forward filter, backward sample.  Returns int64 labels for one sequence.

    logb: (T, K) emission log-densities; u: (T,) pre-drawn uniforms.
    """
    T, K = logb.shape
    A = np.empty((T, K))
    # forward pass in log space with per-step normalization
    mx = -1.0e300
    for k in range(K):
        A[0, k] = log_init[k] + logb[0, k]
        if A[0, k] > mx:
            mx = A[0, k]
    s = 0.0
    for k in range(K):
        A[0, k] = math.exp(A[0, k] - mx)
        s += A[0, k]
    for k in range(K):
        A[0, k] /= s
    for t in range(1, T):
        mx = -1.0e300
        for k in range(K):
            acc = 0.0
            for j in range(K):
                acc += A[t - 1, j] * trans[j, k]
            v = math.log(acc + 1e-300) + logb[t, k]
            A[t, k] = v
            if v > mx:
                mx = v
        s = 0.0
        for k in range(K):
            A[t, k] = math.exp(A[t, k] - mx)
            s += A[t, k]
        for k in range(K):
            A[t, k] /= s
    z = np.empty(T, dtype=np.int64)
    # sample the last state, then walk backwards
    r = u[T - 1]
    acc = 0.0
    pick = K - 1
    for k in range(K):
        acc += A[T - 1, k]
        if r <= acc:
            pick = k
            break
    z[T - 1] = pick
    for t in range(T - 2, -1, -1):
        s = 0.0
        for k in range(K):
            A[t, k] = A[t, k] * trans[k, z[t + 1]]
            s += A[t, k]
        r = u[t] * s
        acc = 0.0
        pick = K - 1
        for k in range(K):
            acc += A[t, k]
            if r <= acc:
                pick = k
                break
        z[t] = pick
    return z


def _gauss_logb(x: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    # x: (T, C); means/vars: (K, C) -> (T, K) log density sums over channels
    d = x[:, None, :] - means[None, :, :]
    return -0.5 * np.sum(np.log(2.0 * np.pi * variances)[None, :, :]
                         + d * d / variances[None, :, :], axis=2)


def _farthest_point_rows(x: np.ndarray, k: int, first: int) -> np.ndarray:
    idx = [first]
    d2 = np.sum((x - x[first]) ** 2, axis=1)
    for _ in range(1, k):
        j = int(np.argmax(d2))
        idx.append(j)
        d2 = np.minimum(d2, np.sum((x - x[j]) ** 2, axis=1))
    return x[np.array(idx)]


def _kmeans_init(x: np.ndarray, k: int, iters: int = 10) -> np.ndarray:
    centers = _farthest_point_rows(x, k, int(np.argmin(np.sum((x - x.mean(0)) ** 2, axis=1))))
    for _ in range(iters):
        d = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        lab = d.argmin(axis=1)
        for j in range(k):
            m = lab == j
            if m.any():
                centers[j] = x[m].mean(axis=0)
    return lab


def _coerce_sequences(sequences):
    out = []
    for seq in sequences:
        if len(seq) and hasattr(seq[0], "energies"):
            arr = np.stack([np.asarray(s.energies, float) for s in seq])
        else:
            arr = np.atleast_2d(np.asarray(seq, float))
        if arr.size == 0:
            raise ValueError("empty sequence")
        if not np.isfinite(arr).all():
            raise ValueError("sequence energies must be finite")
        out.append(arr)
    if not out:
        raise ValueError("need at least one sequence")
    C = out[0].shape[1]
    if any(a.shape[1] != C for a in out):
        raise ValueError("all sequences must share the channel count")
    return out


def _crt_tables(n: int, conc: float, rng: np.random.Generator) -> int:
    """Number of occupied tables when n customers join a restaurant with
    concentration ``conc`` (Chinese-restaurant table count)."""
    if n <= 0:
        return 0
    i = np.arange(n, dtype=float)
    return int(np.sum(rng.random(n) < conc / (conc + i)))


def fit_sticky_hmm(sequences, k_max: int = 20, gamma: float = 1.0,
                   alpha: float = 1.0, kappa: float = 50.0, sweeps: int = 500,
                   burnin: int = 250,
                   rng: np.random.Generator | None = None) -> StickyHmmFit:
    """Truncated (weak-limit) sticky hierarchical chain over shared states.

    Blocked Gibbs: per-sequence forward-backward label sampling given the
    current parameters, then conjugate resampling of emissions (independent
    Normal-Inverse-Gamma per state and channel), transition rows
    (Dirichlet(alpha*beta + kappa*delta + counts)) and the global state weights
    beta (table counts with the self-transition override correction).  States
    unused by the final sweep's labels are dropped and the rest relabeled in
    canonical (lexicographic mean) order.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if k_max < 2:
        raise ValueError("k_max must be >= 2")
    if sweeps < 1 or burnin < 0 or burnin >= sweeps:
        raise ValueError("need sweeps >= 1 and 0 <= burnin < sweeps")
    seqs = _coerce_sequences(sequences)
    K = int(k_max)
    C = seqs[0].shape[1]
    pooled = np.concatenate(seqs, axis=0)
    N = pooled.shape[0]

    # empirical NIG base per channel
    m0 = pooled.mean(axis=0)
    b0 = np.maximum(pooled.var(axis=0), 1e-12 * (1.0 + m0 * m0))
    k0 = 1.0
    a0 = 1.0

    kinit = int(min(K, 8, N))
    lab0 = _kmeans_init(pooled, kinit) if kinit > 1 else np.zeros(N, dtype=np.int64)
    means = np.tile(m0, (K, 1))
    variances = np.tile(b0, (K, 1))
    for j in range(kinit):
        m = lab0 == j
        if m.any():
            means[j] = pooled[m].mean(axis=0)
            variances[j] = np.maximum(pooled[m].var(axis=0), 1e-8 * b0)
    beta = np.full(K, 1.0 / K)
    pi0 = np.full(K, 1.0 / K)
    trans = np.full((K, K), 1.0, dtype=float)
    trans += kappa * np.eye(K)
    trans /= trans.sum(axis=1, keepdims=True)

    rho = kappa / (alpha + kappa)
    labels = [np.zeros(len(s), dtype=np.int64) for s in seqs]
    for _ in range(sweeps):
        log_init = np.log(np.maximum(pi0, 1e-300))
        log_trans = np.log(np.maximum(trans, 1e-300))
        njk = np.zeros((K, K))
        n0 = np.zeros(K)
        occ_sum = np.zeros((K, C))
        occ_sq = np.zeros((K, C))
        occ_n = np.zeros(K)
        for i, x in enumerate(seqs):
            logb = _gauss_logb(x, means, variances)
            z = _ffbs(logb, log_init, log_trans, trans, rng.random(len(x)))
            labels[i] = z
            n0[z[0]] += 1.0
            np.add.at(njk, (z[:-1], z[1:]), 1.0)
            np.add.at(occ_sum, z, x)
            np.add.at(occ_sq, z, x * x)
            np.add.at(occ_n, z, 1.0)
        # emissions: conjugate draw per state/channel (prior draw when empty)
        kn = k0 + occ_n[:, None]
        mn = (k0 * m0[None, :] + occ_sum) / kn
        an = a0 + 0.5 * occ_n[:, None]
        bn = b0[None, :] + 0.5 * (occ_sq + k0 * m0[None, :] ** 2 - kn * mn * mn)
        bn = np.maximum(bn, 1e-300)
        variances = bn / rng.gamma(np.broadcast_to(an, (K, C)))
        variances = np.maximum(variances, 1e-12 * (1.0 + m0[None, :] ** 2))
        means = rng.normal(mn, np.sqrt(variances / kn))
        # table counts for the global weights, with the sticky override removed
        mbar = np.zeros((K, K))
        for j in range(K):
            for k in range(K):
                n = int(njk[j, k])
                if n == 0:
                    continue
                conc = alpha * beta[k] + (kappa if j == k else 0.0)
                m = _crt_tables(n, conc, rng)
                if j == k and m > 0:
                    p_override = rho / (rho + beta[k] * (1.0 - rho))
                    m -= int(rng.binomial(m, p_override))
                mbar[j, k] = m
        m_init = np.array([_crt_tables(int(n0[k]), alpha * beta[k], rng)
                           for k in range(K)], dtype=float)
        beta = rng.dirichlet(gamma / K + mbar.sum(axis=0) + m_init)
        beta = np.maximum(beta, 1e-12)
        beta /= beta.sum()
        pi0 = rng.dirichlet(alpha * beta + n0)
        pi0 = np.maximum(pi0, 1e-300)
        pi0 /= pi0.sum()
        conc_rows = alpha * beta[None, :] + kappa * np.eye(K) + njk
        trans = np.vstack([rng.dirichlet(conc_rows[j]) for j in range(K)])
        trans = np.maximum(trans, 1e-300)
        trans /= trans.sum(axis=1, keepdims=True)

    used = np.zeros(K, dtype=bool)
    for z in labels:
        used[np.unique(z)] = True
    active = np.flatnonzero(used)
    order = active[np.lexsort(tuple(means[active, c] for c in range(C - 1, -1, -1)))]
    relabel = np.full(K, -1, dtype=np.int64)
    relabel[order] = np.arange(order.size)
    sub = trans[np.ix_(order, order)]
    sub = sub / sub.sum(axis=1, keepdims=True)
    return StickyHmmFit(k_active=int(order.size), transmat=sub,
                        means=means[order].copy(),
                        variances=variances[order].copy(),
                        labels=tuple(relabel[z] for z in labels))


# ---------------------------------------------------------------------------
# fusion across cluster heads


def _fit_from_states(means, variances, labels):
    order = np.lexsort(tuple(means[:, c] for c in range(means.shape[1] - 1, -1, -1)))
    relabel = np.empty(order.size, dtype=np.int64)
    relabel[order] = np.arange(order.size)
    labs = tuple(relabel[z] for z in labels)
    k = order.size
    trans = np.zeros((k, k))
    for z in labs:
        if z.size > 1:
            np.add.at(trans, (z[:-1], z[1:]), 1.0)
    trans += 1.0 / k  # keep rows proper for states seen only once
    trans /= trans.sum(axis=1, keepdims=True)
    return StickyHmmFit(k_active=k, transmat=trans, means=means[order].copy(),
                        variances=variances[order].copy(), labels=labs)


def fuse_cluster_heads(fits, merge_tol: float = 1.0) -> StickyHmmFit:
    """Merge state libraries across cluster heads into one global fit.

    States are pooled and greedily agglomerated: the closest pair under the
    normalized emission distance (RMS over channels of the mean difference in
    pooled-standard-deviation units) merges while below ``merge_tol``.  Labels
    of every input sequence are rewritten to the fused library; the fused
    transition matrix is re-estimated from the relabeled sequences.
    Idempotent: fusing a fused fit with itself changes nothing.
    """
    fits = list(fits)
    if not fits:
        raise ValueError("need at least one fit")
    C = fits[0].n_channels
    if any(f.n_channels != C for f in fits):
        raise ValueError("all fits must share the channel count")
    means = np.concatenate([f.means for f in fits], axis=0)
    variances = np.concatenate([f.variances for f in fits], axis=0)
    counts = np.concatenate([f.counts() for f in fits]).astype(float)
    labels = []
    off = 0
    for f in fits:
        labels.extend(z + off for z in f.labels)
        off += f.k_active

    def dist(i, j):
        s2 = 0.5 * (variances[i] + variances[j])
        return float(np.sqrt(np.mean((means[i] - means[j]) ** 2 / s2)))

    alive = list(range(means.shape[0]))
    parent = np.arange(means.shape[0])
    while len(alive) > 1:
        best = None
        for ai in range(len(alive)):
            for aj in range(ai + 1, len(alive)):
                d = dist(alive[ai], alive[aj])
                if best is None or d < best[0]:
                    best = (d, ai, aj)
        d, ai, aj = best
        if d >= merge_tol:
            break
        i, j = alive[ai], alive[aj]
        wi, wj = max(counts[i], 1.0), max(counts[j], 1.0)
        w = wi + wj
        mu = (wi * means[i] + wj * means[j]) / w
        # pooled second moment keeps between-part spread
        ex2 = (wi * (variances[i] + means[i] ** 2) + wj * (variances[j] + means[j] ** 2)) / w
        means[i] = mu
        variances[i] = np.maximum(ex2 - mu * mu, 1e-12 * (1.0 + mu * mu))
        counts[i] = counts[i] + counts[j]
        parent[parent == j] = i
        alive.pop(aj)

    alive_arr = np.array(alive)
    compact = np.full(means.shape[0], -1, dtype=np.int64)
    compact[alive_arr] = np.arange(alive_arr.size)
    labs = [compact[parent[z]] for z in labels]
    return _fit_from_states(means[alive_arr], variances[alive_arr], labs)


# ---------------------------------------------------------------------------
# occupancy, coverage and queries


def state_occupancy(fit: StickyHmmFit, noise_var: float,
                    margin: float = 0.5) -> np.ndarray:
    """Per-state channel occupancy bits: occupied iff the state's emission mean
    exceeds noise_var + margin on that channel."""
    if margin <= 0:
        raise ValueError("margin must be > 0")
    return (fit.means > noise_var + margin).astype(np.int8)


def estimate_coverage(locations) -> geometry.Circle:
    """Smallest circle enclosing the given occupied-sample locations."""
    pts = np.asarray(locations, float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least 2 occupied locations to estimate coverage")
    return geometry.smallest_enclosing_circle(pts)


def build_spectrum_map(fit: StickyHmmFit, sequences, area_km, noise_var: float,
                       margin: float = 0.5) -> SpectrumMap:
    """Occupancy table plus one coverage circle per channel that has occupied
    samples.  ``sequences`` must be the per-SU SensingSample lists the fit's
    labels refer to (same order)."""
    if len(sequences) != len(fit.labels):
        raise ValueError("sequences and fit labels must align")
    occ = state_occupancy(fit, noise_var, margin)
    locs: list[list[tuple[float, float]]] = [[] for _ in range(fit.n_channels)]
    for seq, z in zip(sequences, fit.labels):
        if len(seq) != len(z):
            raise ValueError("sequences and fit labels must align")
        for s, st in zip(seq, z):
            for c in range(fit.n_channels):
                if occ[st, c]:
                    locs[c].append(s.location)
    circles = []
    for c in range(fit.n_channels):
        if len(locs[c]) >= 2:
            circ = estimate_coverage(locs[c])
            w, h = area_km
            cx = min(max(circ.cx, 0.0), w)
            cy = min(max(circ.cy, 0.0), h)
            circles.append((cx, cy, float(circ.r), c))
    return SpectrumMap(occupancy=occ, circles=tuple(circles),
                       area_km=(float(area_km[0]), float(area_km[1])))


def coverage_error(circles, pus) -> CoverageReport:
    """Match estimated circles to true PU disks (nearest center, same channel,
    each truth used once) and report per-match radius error and center offset."""
    circles = list(circles)
    pus = list(pus)
    pairs = []
    for ei, (cx, cy, r, ch) in enumerate(circles):
        for ti, pu in enumerate(pus):
            if pu.channel != ch:
                continue
            off = math.hypot(cx - pu.position[0], cy - pu.position[1])
            pairs.append((off, ti, ei))
    pairs.sort()
    used_t: set[int] = set()
    used_e: set[int] = set()
    matches = []
    for off, ti, ei in pairs:
        if ti in used_t or ei in used_e:
            continue
        used_t.add(ti)
        used_e.add(ei)
        r_est = circles[ei][2]
        r_true = pus[ti].coverage_radius
        matches.append((ti, ei, abs(r_est - r_true) / r_true, off))
    matches.sort()
    return CoverageReport(
        matches=tuple(matches),
        unmatched_true=tuple(i for i in range(len(pus)) if i not in used_t),
        unmatched_est=tuple(i for i in range(len(circles)) if i not in used_e),
    )


def query_spectrum(spec_map: SpectrumMap, location) -> list[int]:
    """Idle channels at a location: a channel is busy iff the location falls
    inside any coverage circle on that channel."""
    x, y = float(location[0]), float(location[1])
    w, h = spec_map.area_km
    if not (0.0 <= x <= w and 0.0 <= y <= h):
        raise ValueError(f"query location ({x}, {y}) outside area {spec_map.area_km}")
    busy = set()
    for cx, cy, r, ch in spec_map.circles:
        if (x - cx) ** 2 + (y - cy) ** 2 <= r * r:
            busy.add(ch)
    return [c for c in range(spec_map.n_channels) if c not in busy]


# ---------------------------------------------------------------------------
# serialization


def save_map_toml(spec_map: SpectrumMap, path) -> None:
    occ = np.asarray(spec_map.occupancy, dtype=int)
    doc = {
        "area_km": [float(spec_map.area_km[0]), float(spec_map.area_km[1])],
        "states": list(range(occ.shape[0])),
        "occupancy": [[int(v) for v in row] for row in occ],
        "circles": [[float(cx), float(cy), float(r), int(ch)]
                    for cx, cy, r, ch in spec_map.circles],
    }
    with open(path, "w") as fh:
        fh.write(toml.dumps(doc))


def load_map_toml(path) -> SpectrumMap:
    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    occ = np.asarray(doc["occupancy"], dtype=np.int8)
    if occ.ndim != 2:
        occ = occ.reshape(len(doc["states"]), -1)
    circles = tuple((float(c[0]), float(c[1]), float(c[2]), int(c[3]))
                    for c in doc.get("circles", []))
    return SpectrumMap(occupancy=occ, circles=circles,
                       area_km=(float(doc["area_km"][0]), float(doc["area_km"][1])))
