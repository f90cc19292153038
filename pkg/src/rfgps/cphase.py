"""Control phase: per-sample cost expansion, KL-constrained LQR, dual search
on the constraint multiplier and the global step-size rule."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .env_sim import EnvSpec, cost_eval
from .lingauss import (Gaussian, LinearGaussianDynamics, LinearGaussianPolicy, QuadCostTerm,
                       compute_marginals, expected_quadratic_cost, policy_kl, symmetrize)

log = logging.getLogger(__name__)

ETA_MIN = 1e-10
ETA_MAX = 1e16
MAX_DUAL_EVALS = 50


class NotPositiveDefinite(np.linalg.LinAlgError):
    def __init__(self, t: int, eta: float):
        super().__init__(f"Q_uu not positive definite at t={t} (eta={eta:.3g})")
        self.t = t
        self.eta = eta


class DualSearchError(RuntimeError):
    pass


class CPhaseError(RuntimeError):
    """More than half of the local policy solves failed."""


@dataclass
class LocalPolicyResult:
    policy: Optional[LinearGaussianPolicy]
    eta: float = np.nan
    kl_total: float = np.nan
    expected_cost: float = np.nan
    expected_improvement: float = np.nan
    active: bool = True
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.policy is not None


@dataclass(frozen=True)
class StepState:
    epsilon: float
    eps_min: float
    eps_max: float
    prev_expected_dJ: Optional[float] = None
    prev_cost: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.eps_min <= self.eps_max:
            raise ValueError("need 0 < eps_min <= eps_max")
        if not self.eps_min <= self.epsilon <= self.eps_max:
            raise ValueError("epsilon outside [eps_min, eps_max]")


def _clamp_cuu(cuu: np.ndarray) -> np.ndarray:
    out = np.empty_like(cuu)
    for t in range(cuu.shape[0]):
        w, v = np.linalg.eigh(symmetrize(cuu[t]))
        delta = 1e-6 * (1.0 + abs(w.max()))
        if w.min() >= delta:
            out[t] = cuu[t]
        else:
            out[t] = (v * np.maximum(w, delta)) @ v.T
    return out


def quadratize_around_sample(spec: EnvSpec, tau) -> QuadCostTerm:
    """Second-order cost expansion at every (x_t, u_t) of ``tau``; c_uu is made
    positive definite by eigenvalue clamping."""
    if tau.T != spec.horizon:
        raise ValueError(f"trajectory horizon {tau.T} != env horizon {spec.horizon}")
    terms = [cost_eval(spec, tau.states[t], tau.actions[t])[1] for t in range(tau.T)]
    q = QuadCostTerm(*(np.concatenate([getattr(s, f) for s in terms])
                       for f in ("cxx", "cuu", "cux", "cx", "cu", "c0", "x_hat", "u_hat")))
    if not all(np.all(np.isfinite(a)) for a in (q.cxx, q.cuu, q.cux, q.cx, q.cu)):
        raise FloatingPointError("non-finite cost derivatives")
    return replace(q, cuu=_clamp_cuu(q.cuu))


def quadratize_average(spec: EnvSpec, taus) -> QuadCostTerm:
    """Average of the per-sample quadratic models, re-expanded at the mean sample."""
    terms = [quadratize_around_sample(spec, tau) for tau in taus]
    globs = [q.to_global() for q in terms]
    A = np.mean([g[0] for g in globs], axis=0)
    b = np.mean([g[1] for g in globs], axis=0)
    c = np.mean([g[2] for g in globs], axis=0)
    z_hat = np.mean([q.expansion_point() for q in terms], axis=0)
    return QuadCostTerm.from_global(A, b, c, z_hat, spec.state_dim)


def kl_backward_pass(dyn: LinearGaussianDynamics, cost: QuadCostTerm,
                     pbar: LinearGaussianPolicy, eta: float) -> LinearGaussianPolicy:
    """Maximum-entropy LQR on the surrogate cost c/eta - log pbar(u|x).

    Raises :class:`NotPositiveDefinite` when Q_uu loses definiteness.
    """
    if not eta > 0:
        raise ValueError("eta must be positive")
    if not dyn.T == cost.T == pbar.T:
        raise ValueError("horizon mismatch between dynamics, cost and reference policy")
    T, dx, du = dyn.T, dyn.dx, dyn.du
    A, b, _ = cost.to_global()
    H = (A + np.swapaxes(A, 1, 2)) / eta  # Hessian of c/eta
    h = b / eta
    prec = np.linalg.inv(pbar.C)
    fxu = dyn.fxu
    K = np.zeros((T, du, dx))
    k = np.zeros((T, du))
    C = np.zeros((T, du, du))
    Vxx = np.zeros((dx, dx))
    vx = np.zeros(dx)
    ix, iu = slice(0, dx), slice(dx, dx + du)
    for t in range(T - 1, -1, -1):
        P, Kb, kb = prec[t], pbar.K[t], pbar.k[t]
        # -log pbar(u|x) up to a constant, as a quadratic in z = (x, u)
        Qzz = H[t].copy()
        Qzz[iu, iu] += P
        Qzz[iu, ix] -= P @ Kb
        Qzz[ix, iu] -= Kb.T @ P
        Qzz[ix, ix] += Kb.T @ P @ Kb
        qz = h[t].copy()
        qz[iu] -= P @ kb
        qz[ix] += Kb.T @ P @ kb
        Qzz += fxu[t].T @ Vxx @ fxu[t]
        qz += fxu[t].T @ (vx + Vxx @ dyn.fc[t])
        Qzz = symmetrize(Qzz)
        Quu = Qzz[iu, iu]
        try:
            L = np.linalg.cholesky(Quu)
        except np.linalg.LinAlgError:
            raise NotPositiveDefinite(t, eta) from None
        Linv = np.linalg.inv(L)
        Quu_inv = Linv.T @ Linv
        K[t] = -Quu_inv @ Qzz[iu, ix]
        k[t] = -Quu_inv @ qz[iu]
        C[t] = symmetrize(Quu_inv)
        Vxx = symmetrize(Qzz[ix, ix] + Qzz[ix, iu] @ K[t])
        vx = qz[ix] + Qzz[ix, iu] @ k[t]
    return LinearGaussianPolicy(K, k, C)


def backward_with_retry(dyn, cost, pbar, eta: float, retries: int = 10):
    """Run :func:`kl_backward_pass`, doubling eta on indefinite Q_uu.

    :returns: ``(policy, eta_used)``
    """
    for _ in range(retries + 1):
        try:
            return kl_backward_pass(dyn, cost, pbar, eta), eta
        except NotPositiveDefinite:
            eta *= 2.0
    raise NotPositiveDefinite(-1, eta)


def _evaluate(dyn, cost, pbar, init, eta):
    pol, eta = backward_with_retry(dyn, cost, pbar, eta)
    marg = compute_marginals(init, dyn, pol)
    kl, _ = policy_kl(pol, pbar, marg)
    return pol, eta, kl, marg


def solve_local_policy(dyn: LinearGaussianDynamics, cost: QuadCostTerm,
                       pbar: LinearGaussianPolicy, epsilon: float, init: Gaussian,
                       eta0: float = 1.0) -> LocalPolicyResult:
    """Find eta so that the expected KL to ``pbar`` lands in [0.9 eps, eps].

    The KL is evaluated under the candidate policy's own marginals with the
    supplied dynamics and initial-state Gaussian.  The search brackets log eta
    geometrically and then bisects, using at most 50 backward passes.  When
    the KL stays below 0.9 eps all the way down to ``ETA_MIN`` the constraint
    is inactive and the lowest-eta solution is returned.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    lo_ok = 0.9 * epsilon
    evals = 0
    cache = {}

    def f(eta):
        nonlocal evals
        evals += 1
        res = _evaluate(dyn, cost, pbar, init, eta)
        cache[res[1]] = res
        return res

    def done(res, active=True):
        pol, eta, kl, marg = res
        exp_cost = expected_quadratic_cost(marg, cost)
        base = expected_quadratic_cost(compute_marginals(init, dyn, pbar), cost)
        return LocalPolicyResult(policy=pol, eta=eta, kl_total=kl, expected_cost=exp_cost,
                                 expected_improvement=base - exp_cost, active=active)

    res = f(float(np.clip(eta0, ETA_MIN, ETA_MAX)))
    if lo_ok <= res[2] <= epsilon:
        return done(res)
    # expand until the target band is bracketed: hi has KL < band, lo has KL > eps
    hi = lo = None
    if res[2] > epsilon:
        lo = res
        while True:
            if evals >= MAX_DUAL_EVALS or lo[1] >= ETA_MAX:
                raise DualSearchError(f"no eta with KL <= {epsilon:.3g} (last KL {lo[2]:.3g})")
            cand = f(min(lo[1] * 10.0, ETA_MAX))
            if lo_ok <= cand[2] <= epsilon:
                return done(cand)
            if cand[2] < lo_ok:
                hi = cand
                break
            lo = cand
    else:
        hi = res
        while True:
            if hi[1] <= ETA_MIN:
                return done(hi, active=False)
            if evals >= MAX_DUAL_EVALS:
                raise DualSearchError("dual bracket not found")
            cand = f(max(hi[1] / 10.0, ETA_MIN))
            if lo_ok <= cand[2] <= epsilon:
                return done(cand)
            if cand[2] > epsilon:
                lo = cand
                break
            hi = cand
    while evals < MAX_DUAL_EVALS:
        mid = f(np.sqrt(lo[1] * hi[1]))
        if lo_ok <= mid[2] <= epsilon:
            return done(mid)
        if mid[2] > epsilon:
            lo = mid
        else:
            hi = mid
    log.warning("dual search hit %d evaluations; returning feasible eta=%.3g (KL %.3g, eps %.3g)",
                MAX_DUAL_EVALS, hi[1], hi[2], epsilon)
    return done(hi)


def _solve_one(args):
    tau, model, spec, eps = args
    try:
        cost = quadratize_around_sample(spec, tau)
        return solve_local_policy(model.dynamics, cost, model.policy_lin, eps, model.init_gaussian)
    except (np.linalg.LinAlgError, DualSearchError, FloatingPointError, ValueError) as exc:
        return LocalPolicyResult(policy=None, error=f"{type(exc).__name__}: {exc}")


def update_all_local_policies(trajectories, assign, models: list, spec: EnvSpec, eps: float,
                              workers: int = 1) -> list:
    """One local policy per sample: the cost is expanded around that sample,
    dynamics and policy linearization come from its cluster.

    Failed solves are returned as results with ``policy=None``; more than half
    failing raises :class:`CPhaseError`.
    """
    jobs = [(tau, models[int(assign.labels[m])], spec, eps) for m, tau in enumerate(trajectories)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_solve_one, jobs))
    else:
        results = [_solve_one(j) for j in jobs]
    failed = sum(not r.ok for r in results)
    if failed:
        log.warning("%d of %d local policy solves failed", failed, len(results))
    if failed * 2 > len(results):
        raise CPhaseError(f"{failed} of {len(results)} local policy solves failed")
    return results


def adjust_step_size(step: StepState, actual_dJ: Optional[float],
                     expected_dJ: Optional[float]) -> StepState:
    """eps' = eps * dJ_pred / (2 (dJ_pred - dJ_actual)), clamped to the bounds.

    When the prediction was met or beaten (denominator <= 0) the step doubles.
    Missing improvements (first iteration) leave eps unchanged.
    """
    if actual_dJ is None or expected_dJ is None:
        return step
    eps = step.epsilon
    gap = expected_dJ - actual_dJ
    if gap <= 0:
        new = 2.0 * eps
    else:
        new = eps * expected_dJ / (2.0 * gap)
    new = float(np.clip(new, step.eps_min, step.eps_max))
    return replace(step, epsilon=new)
