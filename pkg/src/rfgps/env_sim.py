"""Stochastic toy reaching environments with analytic quadratic-form costs.

Two systems are provided:

* ``double_integrator_reacher``: a point mass in ``n_dims`` dimensions.  State
  is ``(position, velocity, target)``, the action is an acceleration.
* ``two_link_arm_reacher``: a planar two-link arm with point masses at the link
  ends, integrated with semi-implicit Euler.  State is
  ``(q1, q2, dq1, dq2, target_x, target_y)``, actions are joint torques.

The target is part of the state so both the local linearizations and the
global policy see it.  It never changes within an episode.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .lingauss import QuadCostTerm

ENV_KINDS = ("double_integrator_reacher", "two_link_arm_reacher")
TARGET_MODES = ("fixed", "random_per_episode")

# (x, t, rng) -> u
ActionSampler = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


class RolloutError(RuntimeError):
    """A rollout produced a non-finite state."""


@dataclass(frozen=True)
class InitStateDist:
    """Distribution over the physical (non-target) part of the initial state.

    ``kind='gaussian'`` uses ``a`` as mean and ``b`` as per-dimension std;
    ``kind='uniform'`` uses ``a``/``b`` as the box corners.
    """

    kind: str
    a: tuple
    b: tuple

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown initial state distribution {self.kind!r}")
        if len(self.a) != len(self.b):
            raise ValueError("initial state distribution parameters differ in length")
        if self.kind == "gaussian" and min(self.b) < 0:
            raise ValueError("negative standard deviation")
        if self.kind == "uniform" and any(lo > hi for lo, hi in zip(self.a, self.b)):
            raise ValueError("uniform box has low > high")

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        a, b = np.asarray(self.a, float), np.asarray(self.b, float)
        if self.kind == "gaussian":
            return a + b * rng.standard_normal(a.shape[0])
        return rng.uniform(a, b)


@dataclass(frozen=True)
class EnvSpec:
    env_kind: str = "double_integrator_reacher"
    horizon: int = 20
    dt: float = 0.1
    n_dims: int = 2  # position dimension of the double integrator
    process_noise_std: object = 0.01  # scalar or per-state-dimension tuple
    init_state_dist: InitStateDist = field(
        default_factory=lambda: InitStateDist("gaussian", (0.0,) * 4, (0.0,) * 4))
    target_mode: str = "random_per_episode"
    target: tuple = (0.0, 0.0)
    target_low: tuple = (-1.0, -1.0)
    target_high: tuple = (1.0, 1.0)
    action_cost_weight: float = 0.01
    action_bound: Optional[float] = None
    link_lengths: tuple = (0.6, 0.6)
    link_masses: tuple = (1.0, 1.0)
    joint_damping: float = 0.1
    workspace_radius: float = 1.0

    def __post_init__(self):
        if self.env_kind not in ENV_KINDS:
            raise ValueError(f"unknown env_kind {self.env_kind!r}")
        if self.target_mode not in TARGET_MODES:
            raise ValueError(f"unknown target_mode {self.target_mode!r}")
        if self.horizon < 1 or self.n_dims < 1:
            raise ValueError("horizon and n_dims must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.action_cost_weight < 0:
            raise ValueError("action_cost_weight must be nonnegative")
        if self.action_bound is not None and not self.action_bound > 0:
            raise ValueError("action_bound must be positive")
        nt = self.target_dim
        for name in ("target", "target_low", "target_high"):
            if len(getattr(self, name)) != nt:
                raise ValueError(f"{name} must have {nt} entries")
        if len(self.init_state_dist.a) != self.physical_dim:
            raise ValueError(f"initial state distribution must cover {self.physical_dim} dims")
        std = np.asarray(self.process_noise_std, float)
        if std.ndim > 1 or (std.ndim == 1 and std.shape[0] != self.state_dim) or np.any(std < 0):
            raise ValueError("process_noise_std must be a nonnegative scalar or length-dx vector")

    @property
    def physical_dim(self) -> int:
        return 2 * self.n_dims if self.env_kind == "double_integrator_reacher" else 4

    @property
    def target_dim(self) -> int:
        return self.n_dims if self.env_kind == "double_integrator_reacher" else 2

    @property
    def state_dim(self) -> int:
        return self.physical_dim + self.target_dim

    @property
    def action_dim(self) -> int:
        return self.n_dims if self.env_kind == "double_integrator_reacher" else 2

    @property
    def noise_std(self) -> np.ndarray:
        """Per-dimension process noise; a scalar leaves the target dims noise-free."""
        std = np.asarray(self.process_noise_std, float)
        if std.ndim == 1:
            return std
        out = np.zeros(self.state_dim)
        out[:self.physical_dim] = float(std)
        return out

    def target_of(self, x: np.ndarray) -> np.ndarray:
        return x[self.physical_dim:]

    def end_effector(self, x: np.ndarray) -> np.ndarray:
        if self.env_kind == "double_integrator_reacher":
            return x[:self.n_dims]
        return _arm_kinematics(self, x[:2])[0]

    def final_distance(self, x: np.ndarray) -> float:
        return float(np.linalg.norm(self.end_effector(x) - self.target_of(x)))

    def sample_initial_state(self, rng: np.random.Generator) -> np.ndarray:
        phys = self.init_state_dist.sample(rng)
        if self.target_mode == "fixed":
            tgt = np.asarray(self.target, float)
        else:
            tgt = rng.uniform(np.asarray(self.target_low, float), np.asarray(self.target_high, float))
        return np.concatenate([phys, tgt])


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, dx)
    actions: np.ndarray  # (T, du)
    costs: np.ndarray  # (T,)
    seed: Optional[int] = None

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def total_cost(self) -> float:
        return float(self.costs.sum())


def _check_vec(v, n, what):
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise ValueError(f"{what} must have shape ({n},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{what} is not finite")
    return v


def _arm_kinematics(spec: EnvSpec, q):
    """End effector position, its Jacobian and per-coordinate Hessians."""
    l1, l2 = spec.link_lengths
    q1, q2 = q
    s1, c1 = np.sin(q1), np.cos(q1)
    s12, c12 = np.sin(q1 + q2), np.cos(q1 + q2)
    ee = np.array([l1 * c1 + l2 * c12, l1 * s1 + l2 * s12])
    J = np.array([[-l1 * s1 - l2 * s12, -l2 * s12],
                  [l1 * c1 + l2 * c12, l2 * c12]])
    Hx = np.array([[-l1 * c1 - l2 * c12, -l2 * c12], [-l2 * c12, -l2 * c12]])
    Hy = np.array([[-l1 * s1 - l2 * s12, -l2 * s12], [-l2 * s12, -l2 * s12]])
    return ee, J, (Hx, Hy)


def _arm_accel(spec: EnvSpec, q, dq, tau):
    l1, l2 = spec.link_lengths
    m1, m2 = spec.link_masses
    c2, s2 = np.cos(q[1]), np.sin(q[1])
    m11 = (m1 + m2) * l1 ** 2 + m2 * l2 ** 2 + 2 * m2 * l1 * l2 * c2
    m12 = m2 * l2 ** 2 + m2 * l1 * l2 * c2
    m22 = m2 * l2 ** 2
    h = m2 * l1 * l2 * s2
    coriolis = np.array([-h * (2 * dq[0] * dq[1] + dq[1] ** 2), h * dq[0] ** 2])
    rhs = tau - coriolis - spec.joint_damping * dq
    return np.linalg.solve(np.array([[m11, m12], [m12, m22]]), rhs)


def step_env(spec: EnvSpec, state, action, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Advance one timestep.  ``rng=None`` gives the noise-free transition."""
    x = _check_vec(state, spec.state_dim, "state")
    u = _check_vec(action, spec.action_dim, "action")
    if spec.action_bound is not None:
        u = np.clip(u, -spec.action_bound, spec.action_bound)
    dt = spec.dt
    nxt = x.copy()
    if spec.env_kind == "double_integrator_reacher":
        d = spec.n_dims
        pos, vel = x[:d], x[d:2 * d]
        nxt[:d] = pos + dt * vel + 0.5 * dt ** 2 * u
        nxt[d:2 * d] = vel + dt * u
    else:
        q, dq = x[:2], x[2:4]
        dq_new = dq + dt * _arm_accel(spec, q, dq, u)
        nxt[:2] = q + dt * dq_new
        nxt[2:4] = dq_new
    if rng is not None:
        std = spec.noise_std
        if np.any(std > 0):
            nxt = nxt + std * rng.standard_normal(spec.state_dim)
    return nxt


def cost_eval(spec: EnvSpec, state, action):
    """Cost ``|ee(x) - target|^2 + w_u |u|^2`` and its exact second-order
    expansion at ``(state, action)`` as a single-step :class:`QuadCostTerm`."""
    x = _check_vec(state, spec.state_dim, "state")
    u = _check_vec(action, spec.action_dim, "action")
    dx, du, pd = spec.state_dim, spec.action_dim, spec.physical_dim
    w = spec.action_cost_weight
    tgt = spec.target_of(x)
    nt = tgt.shape[0]
    cxx = np.zeros((dx, dx))
    cx = np.zeros(dx)
    if spec.env_kind == "double_integrator_reacher":
        r = x[:nt] - tgt
        eye = np.eye(nt)
        cx[:nt] = 2 * r
        cxx[:nt, :nt] = 2 * eye
        cxx[:nt, pd:] = -2 * eye
        cxx[pd:, :nt] = -2 * eye
    else:
        ee, J, (Hx, Hy) = _arm_kinematics(spec, x[:2])
        r = ee - tgt
        cx[:2] = 2 * J.T @ r
        cxx[:2, :2] = 2 * J.T @ J + 2 * (r[0] * Hx + r[1] * Hy)
        cxx[:2, pd:] = -2 * J.T
        cxx[pd:, :2] = -2 * J
    cx[pd:] = -2 * r
    cxx[pd:, pd:] = 2 * np.eye(nt)
    c = float(r @ r + w * u @ u)
    term = QuadCostTerm(
        cxx=cxx[None], cuu=(2 * w * np.eye(du))[None], cux=np.zeros((1, du, dx)),
        cx=cx[None], cu=(2 * w * u)[None], c0=np.array([c]),
        x_hat=x[None].copy(), u_hat=u[None].copy())
    return c, term


def rollout(spec: EnvSpec, policy: ActionSampler, rng, x0=None) -> Trajectory:
    """Run one episode.

    ``rng`` is either an integer seed (stored on the trajectory) or a
    ``numpy.random.Generator``.  ``x0`` forces the initial state (a
    deterministic reset); otherwise it is drawn from the spec.
    """
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    T, dx, du = spec.horizon, spec.state_dim, spec.action_dim
    states = np.zeros((T + 1, dx))
    actions = np.zeros((T, du))
    costs = np.zeros(T)
    x = spec.sample_initial_state(rng) if x0 is None else _check_vec(x0, dx, "x0").copy()
    states[0] = x
    for t in range(T):
        u = np.asarray(policy(x, t, rng), dtype=float)
        if u.shape != (du,):
            raise ValueError(f"policy returned shape {u.shape}, expected ({du},)")
        if not np.all(np.isfinite(u)):
            raise RolloutError(f"non-finite action at t={t}: {u}")
        actions[t] = u
        costs[t] = cost_eval(spec, x, u)[0]
        x = step_env(spec, x, u, rng)
        if not np.all(np.isfinite(x)):
            raise RolloutError(f"non-finite state at t={t + 1} (seed={seed}): {x}")
        states[t + 1] = x
    return Trajectory(states=states, actions=actions, costs=costs, seed=seed)


def corner_initial_states(spec: EnvSpec) -> list:
    """Initial states at the corners of the target box, physical state at the
    mean (or centre) of the initial distribution."""
    d = spec.init_state_dist
    a, b = np.asarray(d.a, float), np.asarray(d.b, float)
    phys = a if d.kind == "gaussian" else 0.5 * (a + b)
    lo, hi = np.asarray(spec.target_low, float), np.asarray(spec.target_high, float)
    n = lo.shape[0]
    out = []
    for mask in range(2 ** n):
        bits = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        out.append(np.concatenate([phys, np.where(bits, hi, lo)]))
    return out
