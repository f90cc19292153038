"""Time-varying linear-Gaussian models and the closed-form Gaussian algebra
used throughout the trainer: forward marginals, expected quadratic cost,
expected conditional KL between linear-Gaussian policies and trajectory
log-densities.

Array conventions: a horizon-``T`` object stores per-timestep quantities with a
leading axis of length ``T``.  States have dimension ``dx``, actions ``du``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)
DEFAULT_FLOOR = 1e-6

# relative asymmetry above this is treated as a numerical defect
_ASYM_FAIL = 1e-6
_ASYM_WARN = 1e-10


class NumericalDefect(ArithmeticError):
    """Raised when a propagated covariance has lost symmetry."""


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _checked_symmetric(a: np.ndarray, what: str) -> np.ndarray:
    scale = max(1.0, float(np.max(np.abs(a))))
    asym = float(np.max(np.abs(a - a.T))) / scale
    if asym > _ASYM_FAIL:
        raise NumericalDefect(f"{what}: relative asymmetry {asym:.3g}")
    if asym > _ASYM_WARN:
        warnings.warn(f"{what}: symmetrizing (relative asymmetry {asym:.3g})",
                      RuntimeWarning, stacklevel=3)
    return symmetrize(a)


def floor_eigenvalues(cov: np.ndarray, floor: float) -> np.ndarray:
    """Clip the eigenvalues of a (batch of) symmetric matrices from below."""
    w, v = np.linalg.eigh(symmetrize(cov))
    w = np.maximum(w, floor)
    return (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)


@dataclass
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class LinearGaussianDynamics:
    """p(x_{t+1} | x_t, u_t) = N(fx[t] x_t + fu[t] u_t + fc[t], F[t])."""

    fx: np.ndarray  # (T, dx, dx)
    fu: np.ndarray  # (T, dx, du)
    fc: np.ndarray  # (T, dx)
    F: np.ndarray  # (T, dx, dx)
    info: dict = field(default_factory=dict, compare=False)

    @property
    def T(self) -> int:
        return self.fx.shape[0]

    @property
    def dx(self) -> int:
        return self.fx.shape[1]

    @property
    def du(self) -> int:
        return self.fu.shape[2]

    @property
    def fxu(self) -> np.ndarray:
        return np.concatenate([self.fx, self.fu], axis=2)


@dataclass
class LinearGaussianPolicy:
    """u_t ~ N(K[t] x_t + k[t], C[t])."""

    K: np.ndarray  # (T, du, dx)
    k: np.ndarray  # (T, du)
    C: np.ndarray  # (T, du, du)

    @property
    def T(self) -> int:
        return self.K.shape[0]

    @property
    def du(self) -> int:
        return self.K.shape[1]

    @property
    def dx(self) -> int:
        return self.K.shape[2]

    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.C)

    def mean_action(self, x: np.ndarray, t: int) -> np.ndarray:
        return self.K[t] @ x + self.k[t]

    def sampler(self):
        """Return an action sampler ``(x, t, rng) -> u`` for rollouts."""
        chol = np.linalg.cholesky(self.C)

        def act(x, t, rng):
            return self.K[t] @ x + self.k[t] + chol[t] @ rng.standard_normal(self.du)

        return act

    @classmethod
    def zeros(cls, T: int, dx: int, du: int, cov: float = 1.0) -> "LinearGaussianPolicy":
        return cls(np.zeros((T, du, dx)), np.zeros((T, du)),
                   np.tile(cov * np.eye(du), (T, 1, 1)))


@dataclass
class GaussianMarginals:
    """Per-step joint marginals of z_t = (x_t, u_t) plus the terminal state."""

    mu: np.ndarray  # (T, dx+du)
    sigma: np.ndarray  # (T, dx+du, dx+du)
    mu_final: np.ndarray  # (dx,)
    sigma_final: np.ndarray  # (dx, dx)
    dx: int

    @property
    def T(self) -> int:
        return self.mu.shape[0]

    def state_mean(self, t: int) -> np.ndarray:
        return self.mu[t, :self.dx]

    def state_cov(self, t: int) -> np.ndarray:
        return self.sigma[t, :self.dx, :self.dx]


@dataclass
class QuadCostTerm:
    """Second-order expansion of the per-step cost around (x_hat[t], u_hat[t]).

    c_t(x, u) ~= c0 + [cx; cu].d + 1/2 d' [[cxx, cux'], [cux, cuu]] d,
    with d = (x - x_hat, u - u_hat).
    """

    cxx: np.ndarray  # (T, dx, dx)
    cuu: np.ndarray  # (T, du, du)
    cux: np.ndarray  # (T, du, dx)
    cx: np.ndarray  # (T, dx)
    cu: np.ndarray  # (T, du)
    c0: np.ndarray  # (T,)
    x_hat: np.ndarray  # (T, dx)
    u_hat: np.ndarray  # (T, du)

    @property
    def T(self) -> int:
        return self.cxx.shape[0]

    @property
    def dx(self) -> int:
        return self.cxx.shape[1]

    @property
    def du(self) -> int:
        return self.cuu.shape[1]

    def hessian(self) -> np.ndarray:
        """Full (T, dx+du, dx+du) Hessian."""
        top = np.concatenate([self.cxx, np.swapaxes(self.cux, 1, 2)], axis=2)
        bottom = np.concatenate([self.cux, self.cuu], axis=2)
        return np.concatenate([top, bottom], axis=1)

    def gradient(self) -> np.ndarray:
        return np.concatenate([self.cx, self.cu], axis=1)

    def expansion_point(self) -> np.ndarray:
        return np.concatenate([self.x_hat, self.u_hat], axis=1)

    def to_global(self):
        """Rewrite as c_t(z) = z'A z + b'z + c about the origin.

        :returns: ``(A, b, c)`` with shapes (T, n, n), (T, n), (T,).
        """
        H = self.hessian()
        g = self.gradient()
        z = self.expansion_point()
        Hz = np.einsum("tij,tj->ti", H, z)
        A = 0.5 * H
        b = g - Hz
        c = self.c0 - np.einsum("ti,ti->t", g, z) + 0.5 * np.einsum("ti,ti->t", z, Hz)
        return A, b, c

    @classmethod
    def from_global(cls, A, b, c, z_hat, dx: int) -> "QuadCostTerm":
        """Inverse of :meth:`to_global`, re-expanded around ``z_hat``."""
        H = A + np.swapaxes(A, 1, 2)
        g = np.einsum("tij,tj->ti", H, z_hat) + b
        c0 = np.einsum("ti,tij,tj->t", z_hat, A, z_hat) + np.einsum("ti,ti->t", b, z_hat) + c
        return cls(cxx=H[:, :dx, :dx], cuu=H[:, dx:, dx:], cux=H[:, dx:, :dx],
                   cx=g[:, :dx], cu=g[:, dx:], c0=c0,
                   x_hat=z_hat[:, :dx].copy(), u_hat=z_hat[:, dx:].copy())

    def evaluate(self, x: np.ndarray, u: np.ndarray, t: int) -> float:
        d = np.concatenate([x - self.x_hat[t], u - self.u_hat[t]])
        H = self.hessian()[t]
        g = self.gradient()[t]
        return float(self.c0[t] + g @ d + 0.5 * d @ H @ d)


def compute_marginals(init: Gaussian, dyn: LinearGaussianDynamics,
                      pol: LinearGaussianPolicy) -> GaussianMarginals:
    """Propagate the initial-state Gaussian through the affine-Gaussian chain."""
    if dyn.T != pol.T:
        raise ValueError(f"horizon mismatch: dynamics {dyn.T}, policy {pol.T}")
    if dyn.dx != pol.dx or dyn.du != pol.du or init.dim != dyn.dx:
        raise ValueError("dimension mismatch between init, dynamics and policy")
    T, dx, du = dyn.T, dyn.dx, dyn.du
    mu = np.zeros((T, dx + du))
    sigma = np.zeros((T, dx + du, dx + du))
    fxu = dyn.fxu
    mx, sx = init.mean.copy(), _checked_symmetric(init.cov, "initial covariance")
    for t in range(T):
        K = pol.K[t]
        mu[t, :dx] = mx
        mu[t, dx:] = K @ mx + pol.k[t]
        sxk = sx @ K.T
        sigma[t, :dx, :dx] = sx
        sigma[t, :dx, dx:] = sxk
        sigma[t, dx:, :dx] = sxk.T
        sigma[t, dx:, dx:] = K @ sxk + pol.C[t]
        sigma[t] = _checked_symmetric(sigma[t], f"joint covariance at t={t}")
        mx = fxu[t] @ mu[t] + dyn.fc[t]
        sx = _checked_symmetric(fxu[t] @ sigma[t] @ fxu[t].T + dyn.F[t],
                                f"state covariance at t={t + 1}")
    return GaussianMarginals(mu=mu, sigma=sigma, mu_final=mx, sigma_final=sx, dx=dx)


def expected_quadratic_cost(marg: GaussianMarginals, cost: QuadCostTerm) -> float:
    """Sum over t of E[z'Az + b'z + c] = tr(A S) + m'Am + b'm + c."""
    if cost.T != marg.T or cost.dx + cost.du != marg.mu.shape[1]:
        raise ValueError("cost term does not match marginals")
    A, b, c = cost.to_global()
    m, S = marg.mu, marg.sigma
    total = (np.einsum("tij,tji->", A, S) + np.einsum("ti,tij,tj->", m, A, m)
             + np.einsum("ti,ti->", b, m) + c.sum())
    return float(total)


def policy_kl(q: LinearGaussianPolicy, pbar: LinearGaussianPolicy,
              marg: GaussianMarginals):
    """Expected KL(q(u|x) || pbar(u|x)) under the state marginals of ``marg``.

    :returns: ``(total, per_step)`` where ``per_step`` has length T.
    """
    if q.T != pbar.T or q.T != marg.T:
        raise ValueError("horizon mismatch")
    if q.K.shape != pbar.K.shape:
        raise ValueError("dimension mismatch between policies")
    du = q.du
    try:
        chol_p = np.linalg.cholesky(pbar.C)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("reference policy covariance is not invertible") from exc
    chol_q = np.linalg.cholesky(q.C)
    prec_p = np.linalg.inv(pbar.C)
    logdet_p = 2.0 * np.log(np.diagonal(chol_p, axis1=1, axis2=2)).sum(axis=1)
    logdet_q = 2.0 * np.log(np.diagonal(chol_q, axis1=1, axis2=2)).sum(axis=1)
    per_step = np.zeros(q.T)
    for t in range(q.T):
        mx, sx = marg.state_mean(t), marg.state_cov(t)
        dK = q.K[t] - pbar.K[t]
        dmean = dK @ mx + q.k[t] - pbar.k[t]
        P = prec_p[t]
        quad = dmean @ P @ dmean + np.trace(dK.T @ P @ dK @ sx)
        kl = 0.5 * (np.trace(P @ q.C[t]) - du + logdet_p[t] - logdet_q[t] + quad)
        per_step[t] = max(kl, 0.0)
    return float(per_step.sum()), per_step


class _FlooredGaussians:
    """Batched precision/log-det of covariances with an eigenvalue floor."""

    def __init__(self, cov: np.ndarray, floor: float):
        w, v = np.linalg.eigh(symmetrize(cov))
        w = np.maximum(w, floor)
        self.prec = (v / w[..., None, :]) @ np.swapaxes(v, -1, -2)
        self.logdet = np.log(w).sum(axis=-1)
        self.dim = cov.shape[-1]

    def logpdf(self, resid: np.ndarray, idx=...) -> np.ndarray:
        prec = self.prec[idx]
        maha = np.einsum("...i,...ij,...j->...", resid, prec, resid)
        return -0.5 * (maha + self.logdet[idx] + self.dim * LOG_2PI)


def traj_log_densities(phi, taus, floor: float = DEFAULT_FLOOR) -> np.ndarray:
    """Vectorized :func:`traj_log_density` over a list of trajectories."""
    dyn, pol = phi.dynamics, phi.policy_lin
    X = np.stack([tau.states for tau in taus])  # (M, T+1, dx)
    U = np.stack([tau.actions for tau in taus])  # (M, T, du)
    if U.shape[1] != dyn.T or U.shape[1] != pol.T:
        raise ValueError("trajectory horizon does not match the cluster model")
    init = _FlooredGaussians(phi.init_gaussian.cov, floor)
    out = init.logpdf(X[:, 0] - phi.init_gaussian.mean)
    pol_g = _FlooredGaussians(pol.C, floor)
    dyn_g = _FlooredGaussians(dyn.F, floor)
    xt = X[:, :-1]
    u_res = U - (np.einsum("tij,mtj->mti", pol.K, xt) + pol.k)
    x_pred = (np.einsum("tij,mtj->mti", dyn.fx, xt) + np.einsum("tij,mtj->mti", dyn.fu, U)
              + dyn.fc)
    x_res = X[:, 1:] - x_pred
    out = out + pol_g.logpdf(u_res).sum(axis=1) + dyn_g.logpdf(x_res).sum(axis=1)
    return out


def traj_log_density(phi, tau, floor: float = DEFAULT_FLOOR) -> float:
    """log p_k(tau) under a cluster model: initial state, policy linearization
    and dynamics factors, each a Gaussian with eigenvalues floored at ``floor``."""
    return float(traj_log_densities(phi, [tau], floor)[0])
