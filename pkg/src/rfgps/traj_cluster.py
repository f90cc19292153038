"""Hard-EM clustering of trajectories into Gaussian trajectory distributions.

Each cluster is described by an initial-state Gaussian, a time-varying
dynamics fit, a time-varying linearization of the global policy and a mixture
mass.  Trajectories are assigned to the cluster with the highest
``log P(k) + log p_k(tau)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dyn_fit import (GmmPrior, SampleSet, dynamics_tuples, fit_dynamics, fit_gmm_prior,
                      fit_initial_gaussian, fit_policy_linearization, policy_tuples)
from .lingauss import (DEFAULT_FLOOR, Gaussian, LinearGaussianDynamics, LinearGaussianPolicy,
                       traj_log_densities)

log = logging.getLogger(__name__)


@dataclass
class ClusterModel:
    init_gaussian: Gaussian
    dynamics: LinearGaussianDynamics
    policy_lin: LinearGaussianPolicy
    mass: float


@dataclass
class Assignment:
    labels: np.ndarray  # (M,) cluster index per trajectory
    iterations: int = 0
    converged: bool = False
    log_densities: Optional[np.ndarray] = None  # (M, K): log P(k) + log p_k(tau_m)
    cll_trace: list = field(default_factory=list)

    @property
    def n_clusters(self) -> int:
        return 0 if self.log_densities is None else self.log_densities.shape[1]

    def sizes(self, K: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=K)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


@dataclass
class FitOptions:
    """Regression and prior settings shared by the M-step and the baseline."""

    floor: float = DEFAULT_FLOOR
    ridge_scale: float = 1e-6
    use_prior: bool = False
    prior_components: int = 4
    n0: float = 1.0
    dyn_prior: Optional[GmmPrior] = None
    pol_prior: Optional[GmmPrior] = None

    def with_priors(self, trajectories, rng, extra=()) -> "FitOptions":
        """Copy with GMM priors fit on the pooled tuples of ``trajectories``
        (plus ``extra``, e.g. earlier iterations' samples)."""
        if not self.use_prior:
            return self
        pool = list(trajectories) + list(extra)
        dyn_t, pol_t = dynamics_tuples(pool), policy_tuples(pool)
        nc = max(1, min(self.prior_components, dyn_t.shape[0] // (dyn_t.shape[1] + 1)))
        return FitOptions(
            floor=self.floor, ridge_scale=self.ridge_scale, use_prior=True,
            prior_components=self.prior_components, n0=self.n0,
            dyn_prior=fit_gmm_prior(dyn_t, nc, rng, floor=self.floor),
            pol_prior=fit_gmm_prior(pol_t, nc, rng, floor=self.floor))


def min_cluster_size(M: int, K: int) -> int:
    """Quota for the initial random partition."""
    return max(1, min(max(2, M // (2 * K)), M // K))


def min_occupancy(M: int, K: int) -> int:
    """Smallest cluster kept after an E-step (a singleton cannot support regression)."""
    return max(1, min(2, M // K))


def init_assignments(M: int, K: int, rng: np.random.Generator, max_draws: int = 1000) -> Assignment:
    """Uniform random labels, re-drawn until every cluster is large enough."""
    if K < 1:
        raise ValueError("need at least one cluster")
    if M < K:
        raise ValueError(f"cannot split {M} trajectories into {K} clusters")
    need = min_cluster_size(M, K)
    for _ in range(max_draws):
        labels = rng.integers(0, K, size=M)
        if np.bincount(labels, minlength=K).min() >= need:
            return Assignment(labels=labels)
    # rejection is hopeless for tight M/K; fill the quota then draw the rest
    perm = rng.permutation(M)
    labels = np.empty(M, dtype=np.int64)
    labels[perm[:K * need]] = np.repeat(np.arange(K), need)
    labels[perm[K * need:]] = rng.integers(0, K, size=M - K * need)
    return Assignment(labels=labels)


def fit_cluster(trajectories, opts: FitOptions, mass: float) -> ClusterModel:
    data = SampleSet(list(trajectories))
    use_prior = opts.use_prior and opts.dyn_prior is not None
    dyn = fit_dynamics(data, opts.dyn_prior if use_prior else None, n0=opts.n0,
                       floor=opts.floor, ridge_scale=opts.ridge_scale)
    pol = fit_policy_linearization(data, opts.pol_prior if use_prior else None, n0=opts.n0,
                                   floor=opts.floor, ridge_scale=opts.ridge_scale)
    return ClusterModel(fit_initial_gaussian(data, opts.floor), dyn, pol, mass)


def m_step(trajectories, assign: Assignment, opts: FitOptions, K: Optional[int] = None,
           uniform_mass: bool = False) -> list:
    """Refit every cluster's model on its members.

    Empty clusters are re-seeded with the trajectory that fits its own cluster
    worst (lowest best log-density) before fitting; ``assign.labels`` is
    updated in place when that happens.
    """
    M = len(trajectories)
    K = int(assign.labels.max()) + 1 if K is None else K
    labels = assign.labels
    for k in range(K):
        if np.any(labels == k):
            continue
        sizes = np.bincount(labels, minlength=K)
        donors = np.flatnonzero(sizes[labels] > 1)
        if donors.size == 0:
            raise ValueError("cannot re-seed an empty cluster: every cluster is a singleton")
        if assign.log_densities is not None:
            best = assign.log_densities.max(axis=1)
            m = donors[np.argmin(best[donors])]
        else:
            m = donors[0]
        log.debug("re-seeding empty cluster %d with trajectory %d", k, m)
        labels[m] = k
    sizes = np.bincount(labels, minlength=K)
    models = []
    for k in range(K):
        members = [trajectories[i] for i in np.flatnonzero(labels == k)]
        mass = 1.0 / K if uniform_mass else sizes[k] / M
        models.append(fit_cluster(members, opts, mass))
    return models


def e_step(trajectories, models: list, floor: float = DEFAULT_FLOOR) -> Assignment:
    """Hard assignment to argmax_k [log P(k) + log p_k(tau)]; ties go to the lowest index."""
    if not models:
        raise ValueError("no cluster models")
    logd = np.column_stack([np.log(phi.mass) + traj_log_densities(phi, trajectories, floor)
                            for phi in models])
    labels = np.argmax(logd, axis=1)
    return Assignment(labels=labels, log_densities=logd)


def classification_loglik(assign: Assignment) -> float:
    idx = np.arange(assign.labels.shape[0])
    return float(assign.log_densities[idx, assign.labels].sum())


def _enforce_min_occupancy(assign: Assignment, K: int, need: int) -> int:
    """Move worst-fitting trajectories into under-populated clusters."""
    moved = 0
    labels = assign.labels
    best = assign.log_densities.max(axis=1)
    while True:
        sizes = np.bincount(labels, minlength=K)
        short = np.flatnonzero(sizes < need)
        if short.size == 0:
            return moved
        k = short[0]
        donors = np.flatnonzero((sizes[labels] > need) & (labels != k))
        if donors.size == 0:
            return moved
        m = donors[np.argmin(best[donors])]
        labels[m] = k
        moved += 1


def cluster_trajectories(trajectories, K: int, rng: np.random.Generator, max_iters: int = 20,
                         opts: Optional[FitOptions] = None):
    """Alternate M- and E-steps from a random partition until assignments stop
    changing or ``max_iters`` rounds have run.

    :returns: ``(Assignment, models)``.  ``Assignment.cll_trace`` holds the
        classification log-likelihood after each round.
    """
    opts = FitOptions() if opts is None else opts
    M = len(trajectories)
    if M < K:
        raise ValueError(f"cannot split {M} trajectories into {K} clusters")
    need = min_occupancy(M, K)
    assign = init_assignments(M, K, rng)
    models = m_step(trajectories, assign, opts, K, uniform_mass=True)
    trace = []
    converged = False
    rounds = 0
    for rounds in range(1, max_iters + 1):
        new = e_step(trajectories, models, opts.floor)
        if K > 1:
            _enforce_min_occupancy(new, K, need)
        trace.append(classification_loglik(new))
        changed = not np.array_equal(new.labels, assign.labels)
        assign = new
        if not changed:
            converged = True
            break
        models = m_step(trajectories, assign, opts, K)
    assign.iterations = rounds
    assign.converged = converged
    assign.cll_trace = trace
    return assign, models


def cluster_with_restarts(trajectories, K: int, rng: np.random.Generator, restarts: int = 1,
                          max_iters: int = 20, opts: Optional[FitOptions] = None):
    """Run :func:`cluster_trajectories` ``restarts`` times and keep the result
    with the highest final classification log-likelihood."""
    best = None
    for _ in range(max(1, restarts)):
        assign, models = cluster_trajectories(trajectories, K, rng, max_iters, opts)
        if best is None or assign.cll_trace[-1] > best[0].cll_trace[-1]:
            best = (assign, models)
    return best
