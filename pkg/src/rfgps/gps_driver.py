"""Training loops: reset-free guided policy search with trajectory clustering,
the fixed-initial-state baseline, and policy evaluation."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .cphase import (StepState, adjust_step_size, quadratize_average, solve_local_policy,
                     update_all_local_policies, LocalPolicyResult, CPhaseError)
from .dyn_fit import SampleSet
from .env_sim import EnvSpec, Trajectory, corner_initial_states, rollout
from .sphase import (GlobalPolicy, build_supervision, init_global_policy, save_policy,
                     train_supervised)
from .traj_cluster import Assignment, FitOptions, cluster_with_restarts, fit_cluster

log = logging.getLogger(__name__)

ALGORITHMS = ("reset_free", "classic_mdgps")

REPORT_COLUMNS = ("iteration", "mean_cost", "std_cost", "mean_final_dist", "success_rate",
                  "epsilon", "n_clusters_nonempty", "em_rounds", "mean_kl",
                  "expected_improvement", "actual_improvement", "sphase_loss", "wall_clock_s")

# labels for the per-iteration random streams
STREAM_SAMPLING, STREAM_CLUSTER, STREAM_SPHASE, STREAM_EVAL, STREAM_PRIOR, STREAM_INIT = range(6)


@dataclass
class RunConfig:
    env: EnvSpec = field(default_factory=EnvSpec)
    algorithm: str = "reset_free"
    iterations: int = 20
    samples: int = 30  # M for reset-free
    samples_per_condition: int = 5  # N for the baseline
    conditions: Optional[list] = None  # fixed initial states for the baseline; None = corners
    n_clusters: Optional[int] = None  # None = max(2, M // 5)
    em_max_iters: int = 20
    em_restarts: int = 1
    eps0: float = 1.0
    eps_min: float = 1e-4
    eps_max: Optional[float] = None  # None = 10 * eps0
    use_prior: Optional[bool] = None  # None = on when dx + du > 8
    prior_components: int = 4
    prior_strength: float = 1.0
    prior_accumulate: bool = False
    cov_floor: float = 1e-6
    ridge_scale: float = 1e-6
    hidden: tuple = (42, 42)
    init_cov: float = 0.1
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    eval_episodes: int = 50
    success_threshold: Optional[float] = None  # None = 0.1 * workspace radius
    seed: int = 0
    workers: int = 1
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        for name in ("iterations", "samples", "samples_per_condition", "em_max_iters",
                     "em_restarts", "epochs", "batch_size", "eval_episodes", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_clusters is not None and not 1 <= self.n_clusters <= self.samples:
            raise ValueError("n_clusters must lie in [1, samples]")
        if not self.eps0 > 0 or not self.eps_min > 0:
            raise ValueError("step sizes must be positive")
        if not self.eps_min <= self.eps0 <= self.eps_max_value:
            raise ValueError("eps0 must lie within [eps_min, eps_max]")
        if self.conditions is not None:
            dx = self.env.state_dim
            if not self.conditions or any(len(c) != dx for c in self.conditions):
                raise ValueError(f"conditions must be a nonempty list of length-{dx} states")

    @property
    def K(self) -> int:
        return self.n_clusters if self.n_clusters is not None else max(2, self.samples // 5)

    @property
    def eps_max_value(self) -> float:
        return self.eps_max if self.eps_max is not None else 10.0 * self.eps0

    @property
    def prior_enabled(self) -> bool:
        if self.use_prior is not None:
            return self.use_prior
        return self.env.state_dim + self.env.action_dim > 8

    @property
    def threshold(self) -> float:
        if self.success_threshold is not None:
            return self.success_threshold
        return 0.1 * self.env.workspace_radius

    def initial_conditions(self) -> list:
        if self.conditions is not None:
            return [np.asarray(c, float) for c in self.conditions]
        return corner_initial_states(self.env)

    def fit_options(self) -> FitOptions:
        return FitOptions(floor=self.cov_floor, ridge_scale=self.ridge_scale,
                          use_prior=self.prior_enabled, prior_components=self.prior_components,
                          n0=self.prior_strength)


@dataclass
class IterationRecord:
    iteration: int
    mean_cost: float
    std_cost: float
    mean_final_dist: float
    success_rate: float
    epsilon: float
    n_clusters_nonempty: int
    em_rounds: int
    mean_kl: float
    expected_improvement: float
    actual_improvement: float
    sphase_loss: float
    wall_clock_s: float
    episodes: int = 0
    failed_local: int = 0
    cluster_sizes: tuple = ()


@dataclass
class TrainingReport:
    algorithm: str
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    policy: Optional[GlobalPolicy] = None

    def rows(self, wall_clock: bool = False) -> list:
        out = []
        for r in self.records:
            row = {c: getattr(r, c) for c in REPORT_COLUMNS}
            if not wall_clock:
                row["wall_clock_s"] = float("nan")
            out.append(row)
        return out

    def write_csv(self, path, wall_clock: bool = False) -> None:
        """Write report rows.  Wall-clock time is non-deterministic, so it is
        written as ``nan`` unless ``wall_clock`` is set."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for row in self.rows(wall_clock):
                w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])

    def write_timing(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("iteration", "wall_clock_s"))
            for r in self.records:
                w.writerow((r.iteration, f"{r.wall_clock_s:.3f}"))


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def stream(seed: int, label: int, iteration: int = 0) -> np.random.Generator:
    """Independent generator for one (label, iteration) pair of a run."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(label, iteration)))


@dataclass
class EvalMetrics:
    mean_final_dist: float
    std_final_dist: float
    success_rate: float
    distances: np.ndarray


def evaluate_policy(pol, spec: EnvSpec, n_episodes: int, success_threshold: float,
                    rng: np.random.Generator) -> EvalMetrics:
    """Roll out the deterministic policy mean from freshly drawn initial states
    (with the environment's process noise) and measure final distance."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be positive")
    act = pol.mean_sampler() if isinstance(pol, GlobalPolicy) else pol
    dists = np.array([spec.final_distance(rollout(spec, act, rng).states[-1])
                      for _ in range(n_episodes)])
    return EvalMetrics(float(dists.mean()), float(dists.std()),
                       float(np.mean(dists < success_threshold)), dists)


def _sample(cfg: RunConfig, policy: GlobalPolicy, it: int, starts=None) -> list:
    rng = stream(cfg.seed, STREAM_SAMPLING, it)
    n = cfg.samples if starts is None else len(starts)
    seeds = rng.integers(0, 2 ** 63, size=n)
    act = policy.sampler()
    if starts is None:
        return [rollout(cfg.env, act, int(s)) for s in seeds]
    return [rollout(cfg.env, act, int(s), x0=x0) for s, x0 in zip(seeds, starts)]


class _Loop:
    """Bookkeeping shared by both algorithms."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.policy = init_global_policy(cfg.env.state_dim, cfg.env.action_dim, cfg.hidden,
                                         stream(cfg.seed, STREAM_INIT), cfg.init_cov)
        self.step = StepState(cfg.eps0, cfg.eps_min, cfg.eps_max_value)
        self.report = TrainingReport(cfg.algorithm)
        self.out = Path(cfg.out_dir) if cfg.out_dir else None
        if self.out:
            (self.out / "checkpoints").mkdir(parents=True, exist_ok=True)
        self.history = []

    def adjust(self, trajs):
        mean_cost = float(np.mean([t.total_cost for t in trajs]))
        actual = None if self.step.prev_cost is None else self.step.prev_cost - mean_cost
        self.step = adjust_step_size(self.step, actual, self.step.prev_expected_dJ)
        return mean_cost, actual

    def priors(self, opts, trajs, it):
        extra = self.history if self.cfg.prior_accumulate else ()
        opts = opts.with_priors(trajs, stream(self.cfg.seed, STREAM_PRIOR, it), extra)
        if self.cfg.prior_accumulate:
            self.history = list(self.history) + list(trajs)
        return opts

    def finish(self, it, t0, trajs, locals_, mean_cost, actual, n_nonempty, em_rounds, sizes):
        cfg = self.cfg
        ok = [r for r in locals_ if r.ok]
        expected = float(np.mean([r.expected_improvement for r in ok]))
        mean_kl = float(np.mean([r.kl_total for r in ok]))
        sup = build_supervision(trajs, locals_)
        self.policy, info = train_supervised(self.policy, sup, cfg.epochs, cfg.batch_size,
                                             cfg.learning_rate, stream(cfg.seed, STREAM_SPHASE, it))
        metrics = evaluate_policy(self.policy, cfg.env, cfg.eval_episodes, cfg.threshold,
                                  stream(cfg.seed, STREAM_EVAL, it))
        costs = np.array([t.total_cost for t in trajs])
        rec = IterationRecord(
            iteration=it + 1, mean_cost=mean_cost, std_cost=float(costs.std()),
            mean_final_dist=metrics.mean_final_dist, success_rate=metrics.success_rate,
            epsilon=self.step.epsilon, n_clusters_nonempty=n_nonempty, em_rounds=em_rounds,
            mean_kl=mean_kl, expected_improvement=expected,
            actual_improvement=float("nan") if actual is None else actual,
            sphase_loss=info.final_loss, wall_clock_s=time.perf_counter() - t0,
            episodes=len(trajs), failed_local=len(locals_) - len(ok), cluster_sizes=tuple(sizes))
        self.report.records.append(rec)
        self.step = StepState(self.step.epsilon, self.step.eps_min, self.step.eps_max,
                              prev_expected_dJ=expected, prev_cost=mean_cost)
        if self.out:
            path = self.out / "checkpoints" / f"policy_{it + 1:03d}.bin"
            save_policy(self.policy, path)
            self.report.checkpoints.append(str(path))
        log.info("iter %d: cost %.3f success %.2f dist %.3f eps %.3g kl %.3g",
                 it + 1, mean_cost, metrics.success_rate, metrics.mean_final_dist,
                 self.step.epsilon, mean_kl)
        return rec


def run_reset_free(cfg: RunConfig) -> TrainingReport:
    """On-policy sampling from random initial states, hard-EM trajectory
    clustering, per-sample KL-constrained local policies and supervised
    distillation, repeated ``cfg.iterations`` times."""
    if cfg.algorithm != "reset_free":
        raise ValueError("run_reset_free needs algorithm = reset_free")
    loop = _Loop(cfg)
    base_opts = cfg.fit_options()
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        trajs = _sample(cfg, loop.policy, it)
        mean_cost, actual = loop.adjust(trajs)
        opts = loop.priors(base_opts, trajs, it)
        assign, models = cluster_with_restarts(trajs, cfg.K, stream(cfg.seed, STREAM_CLUSTER, it),
                                               cfg.em_restarts, cfg.em_max_iters, opts)
        locals_ = update_all_local_policies(trajs, assign, models, cfg.env, loop.step.epsilon,
                                            cfg.workers)
        sizes = assign.sizes(cfg.K)
        loop.finish(it, t0, trajs, locals_, mean_cost, actual, int(np.count_nonzero(sizes)),
                    assign.iterations, sizes)
    loop.report.policy = loop.policy
    return loop.report


def classic_local_policies(cfg: RunConfig, groups: list, opts: FitOptions, eps: float) -> list:
    """One local policy per initial condition, fit on that condition's samples
    with the cost expansion averaged over them."""
    results = []
    for taus in groups:
        try:
            model = fit_cluster(taus, opts, 1.0 / len(groups))
            cost = quadratize_average(cfg.env, taus)
            results.append(solve_local_policy(model.dynamics, cost, model.policy_lin, eps,
                                              model.init_gaussian))
        except (np.linalg.LinAlgError, RuntimeError, ValueError) as exc:
            results.append(LocalPolicyResult(policy=None, error=f"{type(exc).__name__}: {exc}"))
    failed = sum(not r.ok for r in results)
    if failed * 2 > len(results):
        raise CPhaseError(f"{failed} of {len(results)} local policy solves failed")
    return results


def run_classic_mdgps(cfg: RunConfig) -> TrainingReport:
    """Baseline: N on-policy samples from each of M fixed initial states per
    iteration, one local policy per initial state, no clustering."""
    if cfg.algorithm != "classic_mdgps":
        raise ValueError("run_classic_mdgps needs algorithm = classic_mdgps")
    loop = _Loop(cfg)
    base_opts = cfg.fit_options()
    conds = cfg.initial_conditions()
    N = cfg.samples_per_condition
    starts = [x0 for x0 in conds for _ in range(N)]
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        trajs = _sample(cfg, loop.policy, it, starts)
        mean_cost, actual = loop.adjust(trajs)
        opts = loop.priors(base_opts, trajs, it)
        groups = [trajs[m * N:(m + 1) * N] for m in range(len(conds))]
        per_cond = classic_local_policies(cfg, groups, opts, loop.step.epsilon)
        locals_ = [res for res in per_cond for _ in range(N)]
        loop.finish(it, t0, trajs, locals_, mean_cost, actual, len(conds), 0, [N] * len(conds))
    loop.report.policy = loop.policy
    return loop.report


def run(cfg: RunConfig) -> TrainingReport:
    if cfg.algorithm == "reset_free":
        return run_reset_free(cfg)
    return run_classic_mdgps(cfg)
