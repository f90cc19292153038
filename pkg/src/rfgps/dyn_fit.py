"""Fitting time-varying linear-Gaussian dynamics and policy linearizations by
per-timestep regression, optionally regularized by a Gaussian mixture prior on
pooled tuples."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .lingauss import (DEFAULT_FLOOR, Gaussian, LinearGaussianDynamics,
                       LinearGaussianPolicy, floor_eigenvalues, symmetrize)

log = logging.getLogger(__name__)


@dataclass
class GmmPrior:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    loglik_trace: list = field(default_factory=list)
    reseeds: int = 0

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_resp(self, pts: np.ndarray) -> np.ndarray:
        """Log posterior responsibilities, shape (N, K)."""
        lp = _component_logpdf(pts, self.means, self.covs) + np.log(self.weights)
        return lp - logsumexp(lp, axis=1, keepdims=True)

    def moments_at(self, point: np.ndarray):
        """Mixture mean and covariance weighted by the responsibilities at ``point``."""
        w = np.exp(self.log_resp(point[None])[0])
        mu0 = w @ self.means
        diff = self.means - mu0
        sigma0 = np.einsum("k,kij->ij", w, self.covs) + np.einsum("k,ki,kj->ij", w, diff, diff)
        return mu0, symmetrize(sigma0)


def _component_logpdf(pts, means, covs):
    d = pts.shape[1]
    chol = np.linalg.cholesky(covs)
    out = np.empty((pts.shape[0], means.shape[0]))
    for j in range(means.shape[0]):
        z = np.linalg.solve(chol[j], (pts - means[j]).T)
        logdet = 2.0 * np.log(np.diag(chol[j])).sum()
        out[:, j] = -0.5 * (np.sum(z * z, axis=0) + logdet + d * np.log(2 * np.pi))
    return out


def _kmeanspp(pts, k, rng):
    centers = [pts[rng.integers(pts.shape[0])]]
    for _ in range(1, k):
        d2 = np.min(((pts[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(pts[rng.integers(pts.shape[0])])
        else:
            centers.append(pts[rng.choice(pts.shape[0], p=d2 / total)])
    return np.asarray(centers)


def fit_gmm_prior(tuples: np.ndarray, n_components: int, rng: np.random.Generator,
                  floor: float = DEFAULT_FLOOR, max_iter: int = 100,
                  tol: float = 1e-6) -> GmmPrior:
    """EM for a full-covariance Gaussian mixture with k-means++ seeding.

    Stops when the log-likelihood improves by less than ``tol`` relative, or
    after ``max_iter`` iterations.  A component whose effective count drops
    below ``dim + 1`` is re-seeded on a random datum.
    """
    pts = np.asarray(tuples, dtype=float)
    n, d = pts.shape
    if n < n_components:
        raise ValueError(f"need at least {n_components} tuples, got {n}")
    reg = floor * np.eye(d)
    data_cov = symmetrize(np.cov(pts.T, bias=True).reshape(d, d)) + reg
    means = _kmeanspp(pts, n_components, rng)
    covs = np.tile(data_cov, (n_components, 1, 1))
    weights = np.full(n_components, 1.0 / n_components)
    gmm = GmmPrior(weights, means, covs)
    prev = -np.inf
    for it in range(max_iter):
        lp = _component_logpdf(pts, gmm.means, gmm.covs) + np.log(gmm.weights)
        norm = logsumexp(lp, axis=1, keepdims=True)
        ll = float(norm.sum())
        gmm.loglik_trace.append(ll)
        if it > 0 and ll - prev < tol * abs(prev):
            break
        prev = ll
        resp = np.exp(lp - norm)
        nk = resp.sum(axis=0)
        for j in range(n_components):
            if nk[j] < d + 1 and n_components > 1:
                gmm.means[j] = pts[rng.integers(n)]
                gmm.covs[j] = data_cov
                nk[j] = n / n_components
                gmm.reseeds += 1
                continue
            mu = resp[:, j] @ pts / nk[j]
            diff = pts - mu
            gmm.means[j] = mu
            gmm.covs[j] = symmetrize((resp[:, j, None] * diff).T @ diff / nk[j]) + reg
        gmm.weights = nk / nk.sum()
    return gmm


@dataclass
class SampleSet:
    """Trajectories assigned to one cluster or initial condition."""

    trajectories: Sequence

    def __post_init__(self):
        if len(self.trajectories) == 0:
            raise ValueError("empty sample set")
        T = self.trajectories[0].T
        if any(tau.T != T for tau in self.trajectories):
            raise ValueError("trajectories in a sample set must share the horizon")

    def __len__(self):
        return len(self.trajectories)

    @property
    def T(self) -> int:
        return self.trajectories[0].T

    def states(self) -> np.ndarray:
        return np.stack([tau.states for tau in self.trajectories])  # (N, T+1, dx)

    def actions(self) -> np.ndarray:
        return np.stack([tau.actions for tau in self.trajectories])  # (N, T, du)


def dynamics_tuples(trajectories) -> np.ndarray:
    """Rows (x_t, u_t, x_{t+1}) pooled over all trajectories and timesteps."""
    rows = [np.hstack([tau.states[:-1], tau.actions, tau.states[1:]]) for tau in trajectories]
    return np.vstack(rows)


def policy_tuples(trajectories) -> np.ndarray:
    """Rows (x_t, u_t) pooled over all trajectories and timesteps."""
    return np.vstack([np.hstack([tau.states[:-1], tau.actions]) for tau in trajectories])


def _conditional_fit(inp, out, prior, n0, floor, ridge_scale):
    """Regress ``out`` on ``inp`` through the (optionally prior-blended) joint
    second moments.  Returns (coef, offset, residual covariance, degenerate)."""
    n, di = inp.shape
    pts = np.hstack([inp, out])
    mu = pts.mean(axis=0)
    diff = pts - mu
    sigma = diff.T @ diff / n
    if prior is not None and n0 > 0:
        mu0, sigma0 = prior.moments_at(mu)
        dm = mu - mu0
        sigma = (n * sigma + n0 * sigma0 + (n * n0 / (n + n0)) * np.outer(dm, dm)) / (n + n0)
    sigma = symmetrize(sigma)
    s_ii = sigma[:di, :di]
    s_oi = sigma[di:, :di]
    tr = np.trace(s_ii)
    degenerate = not tr > 0
    lam = ridge_scale * tr / di if not degenerate else 0.0
    if degenerate:
        coef = np.zeros((out.shape[1], di))
    else:
        coef = np.linalg.solve(s_ii + lam * np.eye(di), s_oi.T).T
    offset = mu[di:] - coef @ mu[:di]
    s_oo = sigma[di:, di:]
    resid = s_oo - coef @ s_oi.T - s_oi @ coef.T + coef @ s_ii @ coef.T
    w, v = np.linalg.eigh(symmetrize(resid))
    resid = (v * np.maximum(w, 0.0)) @ v.T + floor * np.eye(out.shape[1])
    return coef, offset, symmetrize(resid), degenerate


def fit_dynamics(data: SampleSet, prior: Optional[GmmPrior] = None, n0: float = 1.0,
                 floor: float = DEFAULT_FLOOR, ridge_scale: float = 1e-6) -> LinearGaussianDynamics:
    """Per-timestep linear-Gaussian regression of x_{t+1} on (x_t, u_t).

    With a prior, the empirical second moments are blended with the prior's
    moments at the data mean using ``n0`` pseudo-counts before conditioning.
    """
    if not isinstance(data, SampleSet):
        data = SampleSet(data)
    if len(data) < 2 and prior is None:
        log.debug("dynamics fit from a single trajectory without a prior is degenerate")
    X, U = data.states(), data.actions()
    T, dx, du = data.T, X.shape[2], U.shape[2]
    if prior is not None and prior.dim != 2 * dx + du:
        raise ValueError(f"dynamics prior has dim {prior.dim}, expected {2 * dx + du}")
    fx = np.zeros((T, dx, dx))
    fu = np.zeros((T, dx, du))
    fc = np.zeros((T, dx))
    F = np.zeros((T, dx, dx))
    degenerate_steps = []
    for t in range(T):
        inp = np.hstack([X[:, t], U[:, t]])
        coef, off, cov, degenerate = _conditional_fit(inp, X[:, t + 1], prior, n0, floor, ridge_scale)
        fx[t], fu[t], fc[t], F[t] = coef[:, :dx], coef[:, dx:], off, cov
        if degenerate:
            degenerate_steps.append(t)
    if degenerate_steps:
        log.debug("dynamics fit: identical inputs at steps %s", degenerate_steps)
    return LinearGaussianDynamics(fx, fu, fc, F, info={"degenerate_steps": degenerate_steps})


def fit_policy_linearization(data: SampleSet, prior: Optional[GmmPrior] = None,
                             n0: float = 1.0, floor: float = DEFAULT_FLOOR,
                             ridge_scale: float = 1e-6) -> LinearGaussianPolicy:
    """Per-timestep linear-Gaussian regression of u_t on x_t."""
    if not isinstance(data, SampleSet):
        data = SampleSet(data)
    X, U = data.states(), data.actions()
    T, dx, du = data.T, X.shape[2], U.shape[2]
    if prior is not None and prior.dim != dx + du:
        raise ValueError(f"policy prior has dim {prior.dim}, expected {dx + du}")
    K = np.zeros((T, du, dx))
    k = np.zeros((T, du))
    C = np.zeros((T, du, du))
    for t in range(T):
        K[t], k[t], C[t], _ = _conditional_fit(X[:, t], U[:, t], prior, n0, floor, ridge_scale)
    return LinearGaussianPolicy(K, k, C)


def fit_initial_gaussian(data: SampleSet, floor: float = DEFAULT_FLOOR) -> Gaussian:
    x1 = data.states()[:, 0]
    mean = x1.mean(axis=0)
    diff = x1 - mean
    cov = diff.T @ diff / x1.shape[0]
    return Gaussian(mean, floor_eigenvalues(cov, 0.0) + floor * np.eye(x1.shape[1]))
