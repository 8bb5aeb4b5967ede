"""Budgeted sparse Gaussian-process regression for online Q-value estimates.

Squared-exponential kernel over feature vectors, a dictionary capped at a
fixed budget, and a novelty test on the kernel-space projection residual.
Novel points enter the dictionary (evicting the oldest once full); familiar
points update the posterior through their projection weights only.

The model keeps an explicit Gaussian posterior (mean, covariance) over the
function values at the dictionary points, absorbed one observation at a time
by rank-one conditioning.  With ``drift`` = 0 and every point admitted this
is exactly dense GP regression; a positive ``drift`` inflates the posterior
covariance before each absorption so the regression can track targets that
move over time (bootstrapped Q-values do).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import toml
import tomli

__all__ = [
    "GpQModel",
    "make_gp",
    "gp_predict",
    "gp_predict_mean_many",
    "gp_update",
    "save_gp_toml",
    "load_gp_toml",
]

log = logging.getLogger("sir.gpq")

_ALD_JITTER = 1e-10


@dataclass
class GpQModel:
    lengthscale: float = 1.0
    signal_var: float = 1.0
    noise: float = 0.1
    budget: int = 300
    ald_tol: float = 0.01
    drift: float = 0.0
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    kmat: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    chol: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cov: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    coef: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.lengthscale <= 0 or self.signal_var <= 0:
            raise ValueError("lengthscale and signal_var must be > 0")
        if self.noise <= 0:
            raise ValueError("noise must be > 0")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.ald_tol <= 0:
            raise ValueError("ald_tol must be > 0")
        if self.drift < 0:
            raise ValueError("drift must be >= 0")

    @property
    def size(self) -> int:
        return self.points.shape[0]


def make_gp(lengthscale: float = 1.0, signal_var: float = 1.0, noise: float = 0.1,
            budget: int = 300, ald_tol: float = 0.01, drift: float = 0.0) -> GpQModel:
    return GpQModel(lengthscale=lengthscale, signal_var=signal_var, noise=noise,
                    budget=budget, ald_tol=ald_tol, drift=drift)


def _kernel(gp: GpQModel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d2 = (np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :]
          - 2.0 * (a @ b.T))
    return gp.signal_var * np.exp(-0.5 * np.maximum(d2, 0.0) / gp.lengthscale ** 2)


def _chol_with_rescue(mat: np.ndarray, base_jitter: float) -> np.ndarray:
    jitter = base_jitter
    for attempt in range(6):
        try:
            chol = np.linalg.cholesky(mat + jitter * np.eye(mat.shape[0]))
            if np.all(np.diag(chol) > 0):
                return chol
        except np.linalg.LinAlgError:
            pass
        jitter = max(jitter, 1e-10) * 100.0
        log.warning("kernel factorization failed; retrying with jitter %.1e", jitter)
    raise np.linalg.LinAlgError("kernel matrix factorization failed after jitter rescue")


def _chol_solve(chol: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    from scipy.linalg import solve_triangular

    z = solve_triangular(chol, rhs, lower=True, check_finite=False)
    return solve_triangular(chol.T, z, lower=False, check_finite=False)


def _sync_coef(gp: GpQModel) -> None:
    gp.coef = _chol_solve(gp.chol, gp.mean)


def _absorb(gp: GpQModel, weights: np.ndarray, target: float) -> None:
    """Condition the dictionary posterior on one observation

        y = weights . u + noise.
    """
    v = gp.cov @ weights
    s = float(weights @ v) + gp.noise
    g = (target - float(weights @ gp.mean)) / s
    gp.mean = gp.mean + g * v
    gp.cov = gp.cov - np.outer(v, v) / s
    gp.cov = 0.5 * (gp.cov + gp.cov.T)


def gp_predict(gp: GpQModel, x) -> tuple[float, float]:
    """Posterior mean and variance at one feature point.

    Empty dictionary: prior (0, signal variance).
    """
    x = np.asarray(x, float).ravel()
    if gp.size == 0:
        return 0.0, float(gp.signal_var)
    k = _kernel(gp, x[None, :], gp.points).ravel()
    a = _chol_solve(gp.chol, k)
    mean = float(k @ gp.coef)
    var = float(gp.signal_var - k @ a + a @ (gp.cov @ a))
    return mean, max(var, 0.0)


def gp_predict_mean_many(gp: GpQModel, xs: np.ndarray) -> np.ndarray:
    """Posterior means for a batch of feature rows (fast path for acting)."""
    xs = np.atleast_2d(np.asarray(xs, float))
    if gp.size == 0:
        return np.zeros(xs.shape[0])
    return _kernel(gp, xs, gp.points) @ gp.coef


def _append_point(gp: GpQModel, x: np.ndarray, k: np.ndarray,
                  weights: np.ndarray, resid: float) -> None:
    m = gp.size
    kxx = float(gp.signal_var)
    cross = gp.cov @ weights
    mu_new = float(weights @ gp.mean)
    var_new = max(resid, 0.0) + float(weights @ cross)
    gp.points = np.vstack([gp.points, x[None, :]])
    newk = np.empty((m + 1, m + 1))
    newk[:m, :m] = gp.kmat
    newk[m, :m] = k
    newk[:m, m] = k
    newk[m, m] = kxx
    gp.kmat = newk
    gp.mean = np.append(gp.mean, mu_new)
    newc = np.empty((m + 1, m + 1))
    newc[:m, :m] = gp.cov
    newc[m, :m] = cross
    newc[:m, m] = cross
    newc[m, m] = var_new
    gp.cov = newc
    # extend the factorization by one row; the diagonal term is the ALD
    # residual plus jitter, positive whenever the point was admitted
    from scipy.linalg import solve_triangular

    z = solve_triangular(gp.chol, k, lower=True, check_finite=False)
    d2 = kxx + _ALD_JITTER - float(z @ z)
    if d2 <= 0.0:
        gp.chol = _chol_with_rescue(gp.kmat, _ALD_JITTER)
    else:
        newl = np.zeros((m + 1, m + 1))
        newl[:m, :m] = gp.chol
        newl[m, :m] = z
        newl[m, m] = np.sqrt(d2)
        gp.chol = newl


def _evict_oldest(gp: GpQModel) -> None:
    gp.points = gp.points[1:]
    gp.kmat = gp.kmat[1:, 1:]
    gp.mean = gp.mean[1:]
    gp.cov = gp.cov[1:, 1:]
    gp.chol = _chol_with_rescue(gp.kmat, _ALD_JITTER)


def gp_update(gp: GpQModel, x, target: float) -> GpQModel:
    """Absorb one (feature, target) pair.

    Novelty = squared kernel-space residual of projecting the feature on the
    dictionary span; above the tolerance the point is inserted (oldest evicted
    at budget) and the posterior extended by its prior conditional; below it
    the observation conditions the posterior through the projection weights.
    """
    x = np.asarray(x, float).ravel()
    target = float(target)
    if not np.isfinite(target):
        raise ValueError("target must be finite")
    if gp.size == 0:
        gp.points = x[None, :].copy()
        gp.kmat = _kernel(gp, gp.points, gp.points)
        gp.chol = _chol_with_rescue(gp.kmat, _ALD_JITTER)
        gp.mean = np.zeros(1)
        gp.cov = gp.kmat.copy()
        _absorb(gp, np.ones(1), target)
        _sync_coef(gp)
        assert gp.size <= gp.budget
        return gp

    if gp.drift > 0.0:
        gp.cov = gp.cov + gp.drift * np.eye(gp.size)

    k = _kernel(gp, x[None, :], gp.points).ravel()
    weights = _chol_solve(gp.chol, k)
    resid = float(gp.signal_var - k @ weights)
    if resid > gp.ald_tol:
        if gp.size == gp.budget:
            _evict_oldest(gp)
            k = k[1:]
            weights = _chol_solve(gp.chol, k)
            resid = float(gp.signal_var - k @ weights)
        _append_point(gp, x, k, weights, resid)
        unit = np.zeros(gp.size)
        unit[-1] = 1.0
        _absorb(gp, unit, target)
    else:
        _absorb(gp, weights, target)
    _sync_coef(gp)
    assert gp.size <= gp.budget, "dictionary exceeded budget"
    return gp


def save_gp_toml(gp: GpQModel, path) -> None:
    doc = {
        "kernel": {"lengthscale": gp.lengthscale, "signal_var": gp.signal_var,
                   "noise": gp.noise, "ald_tol": gp.ald_tol, "budget": gp.budget,
                   "drift": gp.drift},
        "dictionary_size": gp.size,
        "coefficients": [float(c) for c in gp.coef],
        "points": [[float(v) for v in row] for row in gp.points],
        "posterior_mean": [float(v) for v in gp.mean],
        "posterior_cov": [[float(v) for v in row] for row in gp.cov],
    }
    with open(path, "w") as fh:
        fh.write(toml.dumps(doc))


def load_gp_toml(path) -> GpQModel:
    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    kern = doc["kernel"]
    gp = make_gp(lengthscale=kern["lengthscale"], signal_var=kern["signal_var"],
                 noise=kern["noise"], budget=kern["budget"], ald_tol=kern["ald_tol"],
                 drift=kern.get("drift", 0.0))
    pts = np.asarray(doc.get("points", []), float)
    if pts.size:
        gp.points = np.atleast_2d(pts)
        gp.kmat = _kernel(gp, gp.points, gp.points)
        gp.chol = _chol_with_rescue(gp.kmat, _ALD_JITTER)
        gp.mean = np.asarray(doc["posterior_mean"], float)
        gp.cov = np.asarray(doc["posterior_cov"], float)
        if gp.mean.shape != (gp.size,) or gp.cov.shape != (gp.size, gp.size):
            raise ValueError("snapshot posterior shape mismatch")
        _sync_coef(gp)
    if gp.size != doc["dictionary_size"]:
        raise ValueError("snapshot dictionary size mismatch")
    return gp
