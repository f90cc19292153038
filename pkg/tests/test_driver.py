import csv
import math

import numpy as np
import pytest

import rfgps.gps_driver as gd
from conftest import riccati_oracle
from rfgps.cphase import update_all_local_policies
from rfgps.env_sim import EnvSpec, InitStateDist, cost_eval, rollout
from rfgps.gps_driver import (REPORT_COLUMNS, RunConfig, classic_local_policies, evaluate_policy,
                              run, run_classic_mdgps, run_reset_free, stream)
from rfgps.lingauss import LinearGaussianDynamics
from rfgps.sphase import GlobalPolicy, init_global_policy
from rfgps.traj_cluster import cluster_with_restarts


def small_env(**kw):
    base = dict(horizon=8, dt=0.25, process_noise_std=0.01)
    base.update(kw)
    return EnvSpec(**base)


def small_config(**kw):
    base = dict(env=small_env(), iterations=2, samples=8, n_clusters=2, eps0=20.0, init_cov=1.0,
                epochs=3, batch_size=32, eval_episodes=5, use_prior=False)
    base.update(kw)
    return RunConfig(**base)


def di_system(spec):
    d, dt, T = spec.n_dims, spec.dt, spec.horizon
    I, Z = np.eye(d), np.zeros((d, d))
    Fx = np.block([[I, dt * I, Z], [Z, I, Z], [Z, Z, I]])
    Fu = np.vstack([0.5 * dt ** 2 * I, dt * I, Z])
    return LinearGaussianDynamics(np.tile(Fx, (T, 1, 1)), np.tile(Fu, (T, 1, 1)),
                                  np.zeros((T, 3 * d)), np.tile(np.diag(spec.noise_std ** 2), (T, 1, 1)))


def zero_policy(spec):
    return GlobalPolicy([np.zeros((spec.action_dim, spec.state_dim))], [np.zeros(spec.action_dim)],
                        np.zeros(spec.action_dim))


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(algorithm="ppo")
    with pytest.raises(ValueError):
        RunConfig(samples=0)
    with pytest.raises(ValueError):
        RunConfig(samples=4, n_clusters=5)
    with pytest.raises(ValueError):
        RunConfig(eps0=100.0, eps_max=10.0)
    with pytest.raises(ValueError):
        RunConfig(algorithm="classic_mdgps", conditions=[(0.0, 0.0)])
    cfg = RunConfig(samples=30)
    assert cfg.K == 6 and cfg.eps_max_value == 10 * cfg.eps0 and cfg.threshold == 0.1


def test_single_iteration_with_one_sample_per_cluster():
    cfg = small_config(iterations=1, samples=3, n_clusters=3)
    report = run_reset_free(cfg)
    assert len(report.records) == 1
    rec = report.records[0]
    assert rec.iteration == 1 and rec.episodes == 3 and rec.n_clusters_nonempty == 3
    assert math.isnan(rec.actual_improvement)
    assert report.policy is not None


def test_reset_free_is_deterministic(tmp_path):
    a = run(small_config(seed=3))
    b = run(small_config(seed=3))
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    np.testing.assert_array_equal(a.policy.flat_params(), b.policy.flat_params())
    c = run(small_config(seed=4))
    assert c.records[0].mean_cost != a.records[0].mean_cost


def test_sphase_settings_do_not_perturb_sampling():
    a = run(small_config(iterations=1, learning_rate=1e-3, batch_size=16))
    b = run(small_config(iterations=1, learning_rate=1e-2, batch_size=64))
    assert a.records[0].mean_cost == b.records[0].mean_cost
    assert a.records[0].std_cost == b.records[0].std_cost
    assert a.records[0].sphase_loss != b.records[0].sphase_loss


def test_streams_are_labelled():
    draws = {(lab, it): stream(7, lab, it).integers(0, 2 ** 62) for lab in range(3) for it in range(3)}
    assert len(set(draws.values())) == 9
    assert stream(7, 1, 2).integers(0, 2 ** 62) == draws[(1, 2)]


def test_report_cost_is_mean_of_trajectory_costs(monkeypatch):
    seen = []
    orig = gd._sample

    def spy(*args, **kw):
        trajs = orig(*args, **kw)
        seen.append([t.total_cost for t in trajs])
        return trajs

    monkeypatch.setattr(gd, "_sample", spy)
    report = run_reset_free(small_config())
    for rec, costs in zip(report.records, seen):
        assert rec.mean_cost == pytest.approx(np.mean(costs), rel=1e-12)
        assert rec.std_cost == pytest.approx(np.std(costs), rel=1e-12)
    rec = report.records[1]
    assert rec.actual_improvement == pytest.approx(report.records[0].mean_cost - rec.mean_cost)


def test_report_csv_schema(tmp_path):
    report = run(small_config())
    path = tmp_path / "report.csv"
    report.write_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert all(r[-1] == "nan" for r in rows[1:])
    report.write_timing(tmp_path / "timing.csv")
    assert (tmp_path / "timing.csv").read_text().startswith("iteration,wall_clock_s")


def test_classic_one_sample_per_condition():
    conds = [(0.0, 0.0, 0.0, 0.0, 0.5, 0.5), (0.0, 0.0, 0.0, 0.0, -0.5, 0.2),
             (0.0, 0.0, 0.0, 0.0, 0.1, -0.7)]
    report = run_classic_mdgps(small_config(algorithm="classic_mdgps", samples_per_condition=1,
                                            conditions=conds, seed=1))
    assert [r.episodes for r in report.records] == [3, 3]
    assert all(r.n_clusters_nonempty == 3 and r.em_rounds == 0 for r in report.records)


def test_classic_corners_share_schema(tmp_path):
    cfg = small_config(algorithm="classic_mdgps", samples_per_condition=2, iterations=1)
    report = run(cfg)
    assert report.records[0].episodes == 8  # four corners of the target box
    assert list(report.rows()[0]) == list(REPORT_COLUMNS)
    with pytest.raises(ValueError):
        run_reset_free(cfg)


def test_reset_free_and_classic_local_policies_agree():
    # one trajectory per cluster and per condition, noise-free linear system
    spec = small_env(process_noise_std=0.0)
    cfg = small_config(env=spec, samples=4, n_clusters=4)
    pol = init_global_policy(spec.state_dim, spec.action_dim, rng=np.random.default_rng(0), init_cov=1.0)
    rng = np.random.default_rng(1)
    trajs = [rollout(spec, pol.sampler(), rng) for _ in range(4)]
    opts = cfg.fit_options()
    assign, models = cluster_with_restarts(trajs, 4, np.random.default_rng(2), 1, 20, opts)
    assert sorted(assign.labels.tolist()) == [0, 1, 2, 3]
    free = update_all_local_policies(trajs, assign, models, spec, 5.0)
    classic = classic_local_policies(cfg, [[t] for t in trajs], opts, 5.0)
    for a, b in zip(free, classic):
        np.testing.assert_allclose(a.policy.K, b.policy.K, rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(a.policy.k, b.policy.k, rtol=1e-8, atol=1e-8)
        np.testing.assert_allclose(a.policy.C, b.policy.C, rtol=1e-8, atol=1e-10)


def test_evaluate_policy_at_target():
    spec = small_env(process_noise_std=0.0, target_mode="fixed", target=(0.3, -0.2),
                     init_state_dist=InitStateDist("gaussian", (0.3, -0.2, 0.0, 0.0), (0.0,) * 4))
    m = evaluate_policy(zero_policy(spec), spec, 5, 0.1, np.random.default_rng(0))
    assert m.success_rate == 1.0 and m.mean_final_dist == 0.0


def test_evaluate_zero_policy_distance():
    spec = small_env(process_noise_std=0.0, target_mode="fixed", target=(0.6, 0.8))
    m = evaluate_policy(zero_policy(spec), spec, 4, 0.1, np.random.default_rng(0))
    assert m.mean_final_dist == pytest.approx(1.0, abs=1e-12)
    assert m.success_rate == 0.0 and m.std_final_dist == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        evaluate_policy(zero_policy(spec), spec, 0, 0.1, np.random.default_rng(0))


def test_success_rate_is_fraction_of_episodes():
    spec = small_env()
    pol = init_global_policy(6, 2, rng=np.random.default_rng(3))
    m = evaluate_policy(pol, spec, 40, 0.8, np.random.default_rng(4))
    assert m.distances.shape == (40,)
    assert m.success_rate == sum(d < 0.8 for d in m.distances) / 40
    assert m.mean_final_dist == pytest.approx(np.mean(m.distances))


def test_fixed_target_reaches_riccati_cost():
    std = 0.2
    spec = EnvSpec(horizon=20, dt=0.25, process_noise_std=0.01, target_mode="fixed", target=(0.5, -0.3),
                   init_state_dist=InitStateDist("gaussian", (0.0,) * 4, (std, std, 0.0, 0.0)))
    T = spec.horizon
    _, term = cost_eval(spec, np.zeros(6), np.zeros(2))
    A, b, c = term.to_global()
    _, _, value = riccati_oracle(di_system(spec), np.repeat(A, T, 0), np.repeat(b, T, 0), np.repeat(c, T, 0))
    optimal = value(np.r_[0.0, 0.0, 0.0, 0.0, 0.5, -0.3], np.diag([std ** 2, std ** 2, 0, 0, 0, 0]))
    cfg = RunConfig(env=spec, iterations=4, samples=10, n_clusters=2, eps0=20.0, init_cov=1.0,
                    use_prior=True, eval_episodes=10, seed=0)
    report = run_reset_free(cfg)
    rng = np.random.default_rng(5)
    act = report.policy.mean_sampler()
    achieved = np.mean([rollout(spec, act, rng).total_cost for _ in range(400)])
    assert achieved <= 1.2 * optimal
