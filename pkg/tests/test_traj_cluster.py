import numpy as np
import pytest

from conftest import adjusted_rand_index, as_trajectories, two_system_pair, two_system_trajectories
from rfgps.dyn_fit import SampleSet, fit_dynamics, fit_policy_linearization
from rfgps.traj_cluster import (Assignment, FitOptions, classification_loglik, cluster_trajectories,
                                cluster_with_restarts, e_step, init_assignments, m_step)


def test_ari_helper():
    assert adjusted_rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]) < 0.5


def test_init_single_cluster():
    a = init_assignments(7, 1, np.random.default_rng(0))
    assert np.all(a.labels == 0)


def test_init_occupancy_and_determinism():
    for seed in range(50):
        a = init_assignments(8, 4, np.random.default_rng(seed))
        assert a.sizes(4).min() >= 2
    a = init_assignments(30, 6, np.random.default_rng(3))
    b = init_assignments(30, 6, np.random.default_rng(3))
    assert np.array_equal(a.labels, b.labels)
    assert a.sizes(6).min() >= 2


def test_init_rejects_too_few():
    with pytest.raises(ValueError):
        init_assignments(2, 3, np.random.default_rng(0))


def test_m_step_identical_trajectories():
    X = np.tile(np.linspace(0, 1, 5)[None, :, None], (4, 1, 2))
    U = np.zeros((4, 4, 1))
    trajs = as_trajectories(X, U)
    opts = FitOptions(floor=1e-6)
    (phi,) = m_step(trajs, Assignment(labels=np.zeros(4, dtype=int)), opts, 1)
    np.testing.assert_allclose(phi.init_gaussian.cov, 1e-6 * np.eye(2), atol=1e-18)
    np.testing.assert_allclose(phi.dynamics.F, np.tile(1e-6 * np.eye(2), (4, 1, 1)), atol=1e-15)
    np.testing.assert_allclose(phi.policy_lin.C, np.tile(1e-6 * np.eye(1), (4, 1, 1)), atol=1e-15)
    assert phi.mass == 1.0


def test_m_step_masses_and_definitional_refit():
    rng = np.random.default_rng(1)
    trajs, _ = two_system_trajectories(rng, n_each=2)
    labels = np.array([0, 0, 1, 0])
    models = m_step(trajs, Assignment(labels=labels.copy()), FitOptions(), 2)
    assert [m.mass for m in models] == pytest.approx([0.75, 0.25])
    assert sum(m.mass for m in models) == pytest.approx(1.0, abs=1e-12)
    members = [trajs[i] for i in (0, 1, 3)]
    direct = fit_dynamics(SampleSet(members))
    np.testing.assert_array_equal(models[0].dynamics.fx, direct.fx)
    np.testing.assert_array_equal(models[0].policy_lin.K, fit_policy_linearization(SampleSet(members)).K)


def test_m_step_reseeds_empty_cluster():
    rng = np.random.default_rng(2)
    trajs, _ = two_system_trajectories(rng, n_each=3)
    assign = Assignment(labels=np.zeros(6, dtype=int))
    models = m_step(trajs, assign, FitOptions(), 2)
    assert len(models) == 2
    assert assign.sizes(2).tolist() == [5, 1]


def test_e_step_single_model():
    rng = np.random.default_rng(3)
    trajs, _ = two_system_trajectories(rng, n_each=4)
    models = m_step(trajs, Assignment(labels=np.zeros(8, dtype=int)), FitOptions(), 1)
    assert np.all(e_step(trajs, models).labels == 0)


def test_e_step_recovers_generating_system():
    rng = np.random.default_rng(4)
    trajs, truth = two_system_trajectories(rng, n_each=10)
    models = m_step(trajs, Assignment(labels=truth.copy()), FitOptions(), 2)
    fresh, fresh_truth = two_system_trajectories(rng, n_each=10)
    assert np.array_equal(e_step(fresh, models).labels, fresh_truth)


def test_e_step_ties_and_shift_invariance():
    rng = np.random.default_rng(5)
    trajs, truth = two_system_trajectories(rng, n_each=5)
    models = m_step(trajs, Assignment(labels=truth.copy()), FitOptions(), 2)
    twins = [models[0], models[0]]
    assert np.all(e_step(trajs, twins).labels == 0)
    base = e_step(trajs, models)
    # a common additive constant in every log-density cannot move the argmax
    for phi in models:
        phi.mass *= 0.37
    assert np.array_equal(e_step(trajs, models).labels, base.labels)


def test_single_system_converges_in_one_round():
    rng = np.random.default_rng(6)
    trajs, _ = two_system_trajectories(rng, n_each=6)
    assign, models = cluster_trajectories(trajs[:6], 1, rng)
    assert assign.converged and assign.iterations == 1
    assert len(models) == 1 and models[0].mass == 1.0


def test_two_systems_recovered_with_restarts():
    rng = np.random.default_rng(7)
    trajs, truth = two_system_trajectories(rng)
    assign, models = cluster_with_restarts(trajs, 2, rng, restarts=10)
    assert adjusted_rand_index(assign.labels, truth) == 1.0
    assert sum(m.mass for m in models) == pytest.approx(1.0, abs=1e-12)


def test_classification_loglik_is_monotone():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        trajs, _ = two_system_trajectories(rng)
        assign, _ = cluster_trajectories(trajs, 2, rng)
        assert np.all(np.diff(assign.cll_trace) >= -1e-6)
        assert assign.cll_trace[-1] == pytest.approx(classification_loglik(assign))


def test_clustering_respects_max_iters_and_partitions():
    rng = np.random.default_rng(8)
    trajs, _ = two_system_trajectories(rng, n_each=12)
    assign, models = cluster_trajectories(trajs, 4, rng, max_iters=2)
    assert assign.iterations <= 2
    assert assign.labels.shape == (24,) and set(assign.labels) <= set(range(4))
    assert assign.sizes(4).min() >= 2
    assert sum(m.mass for m in models) == pytest.approx(1.0, abs=1e-12)


def test_clustering_is_deterministic():
    trajs, _ = two_system_trajectories(np.random.default_rng(9))
    a, _ = cluster_trajectories(trajs, 2, np.random.default_rng(11))
    b, _ = cluster_trajectories(trajs, 2, np.random.default_rng(11))
    assert np.array_equal(a.labels, b.labels) and a.cll_trace == b.cll_trace


def test_prior_options_fit_pooled_models():
    rng = np.random.default_rng(10)
    trajs, _ = two_system_trajectories(rng)
    opts = FitOptions(use_prior=True, prior_components=2).with_priors(trajs, rng)
    assert opts.dyn_prior.dim == 3 and opts.pol_prior.dim == 2
    assign, _ = cluster_trajectories(trajs, 2, rng, opts=opts)
    assert assign.sizes(2).sum() == 20
    assert FitOptions().with_priors(trajs, rng).dyn_prior is None


def test_system_pair_is_mirrored():
    a, b = two_system_pair(3)
    np.testing.assert_array_equal(a.fx, -b.fx)
