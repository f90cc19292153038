"""Global policy (a small tanh MLP with a state-independent diagonal Gaussian
output) and its supervised training against the local policies."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

log = logging.getLogger(__name__)

_MAGIC = b"RFGP"
_FORMAT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


@dataclass
class GlobalPolicy:
    weights: list  # weights[i] has shape (sizes[i+1], sizes[i])
    biases: list
    log_diag_cov: np.ndarray  # (du,)

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def dx(self) -> int:
        return self.sizes[0]

    @property
    def du(self) -> int:
        return self.sizes[-1]

    @property
    def cov(self) -> np.ndarray:
        return np.diag(np.exp(self.log_diag_cov))

    def copy(self) -> "GlobalPolicy":
        return GlobalPolicy([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                            self.log_diag_cov.copy())

    def forward(self, X: np.ndarray, keep: bool = False):
        """Batched mean actions.  With ``keep`` also return the hidden
        activations needed for backprop."""
        h = np.atleast_2d(X)
        acts = [h]
        n = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i < n - 1:
                h = np.tanh(h)
            acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts, d_out):
        """Parameter gradients given dL/d(output) for a batch."""
        gW, gb = [None] * len(self.weights), [None] * len(self.weights)
        delta = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            gW[i] = delta.T @ acts[i]
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i]) * (1.0 - acts[i] ** 2)
        return gW, gb

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def set_flat_params(self, theta: np.ndarray) -> None:
        i = 0
        for W, b in zip(self.weights, self.biases):
            W[...] = theta[i:i + W.size].reshape(W.shape)
            i += W.size
            b[...] = theta[i:i + b.size]
            i += b.size

    def sampler(self):
        """Action sampler ``(x, t, rng) -> u`` drawing from N(mu(x), Sigma)."""
        std = np.exp(0.5 * self.log_diag_cov)

        def act(x, t, rng):
            return self.forward(x)[0] + std * rng.standard_normal(self.du)

        return act

    def mean_sampler(self):
        def act(x, t, rng):
            return self.forward(x)[0]

        return act


def init_global_policy(dx: int, du: int, hidden=(42, 42), rng: Optional[np.random.Generator] = None,
                       init_cov: float = 0.1) -> GlobalPolicy:
    """Fan-in scaled random weights; the output layer is shrunk 10x so the
    initial policy outputs near-zero actions."""
    rng = np.random.default_rng(0) if rng is None else rng
    sizes = [dx, *hidden, du]
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        scale = 1.0 / np.sqrt(sizes[i])
        if i == len(sizes) - 2:
            scale *= 0.1
        weights.append(scale * rng.standard_normal((sizes[i + 1], sizes[i])))
        biases.append(np.zeros(sizes[i + 1]))
    return GlobalPolicy(weights, biases, np.full(du, np.log(init_cov)))


def policy_forward(pol: GlobalPolicy, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != pol.dx:
        raise ValueError(f"state has dimension {x.shape[-1]}, policy expects {pol.dx}")
    if not all(np.all(np.isfinite(p)) for p in pol.weights + pol.biases):
        raise FloatingPointError("policy parameters are not finite")
    out = pol.forward(x)
    return out[0] if x.ndim == 1 else out


@dataclass
class SupervisionSet:
    states: np.ndarray  # (N, dx)
    target_means: np.ndarray  # (N, du)
    precisions: np.ndarray  # (N, du, du)

    def __len__(self) -> int:
        return self.states.shape[0]


def build_supervision(trajectories, locals_: list) -> SupervisionSet:
    """Tuples (x_t, K_m[t] x_t + k_m[t], C_m[t]^-1) at every visited state of
    every sample whose local policy solve succeeded.  ``locals_`` is aligned
    with ``trajectories``."""
    if len(trajectories) != len(locals_):
        raise ValueError("local policies are not aligned with trajectories")
    xs, mus, precs = [], [], []
    for tau, res in zip(trajectories, locals_):
        if res is None or not res.ok:
            continue
        pol = res.policy
        X = tau.states[:pol.T]
        xs.append(X)
        mus.append(np.einsum("tij,tj->ti", pol.K, X) + pol.k)
        precs.append(np.linalg.inv(pol.C))
    if not xs:
        raise ValueError("no successful local policies to supervise from")
    return SupervisionSet(np.vstack(xs), np.vstack(mus), np.concatenate(precs))


def weighted_loss(pol: GlobalPolicy, sup: SupervisionSet) -> float:
    """Mean over tuples of (mu_pi - mu_q)' P (mu_pi - mu_q)."""
    r = pol.forward(sup.states) - sup.target_means
    return float(np.einsum("ni,nij,nj->", r, sup.precisions, r) / len(sup))


def loss_and_grad(pol: GlobalPolicy, X, target, P):
    out, acts = pol.forward(X, keep=True)
    r = out - target
    Pr = np.einsum("nij,nj->ni", P, r)
    n = X.shape[0]
    loss = float(np.einsum("ni,ni->", r, Pr) / n)
    # P is symmetric, so d/dr r'Pr = 2 P r
    gW, gb = pol.backward(acts, 2.0 * Pr / n)
    return loss, gW, gb


def kl_objective(pol: GlobalPolicy, sup: SupervisionSet) -> float:
    """Mean over tuples of tr(P Sigma_pi) - log|Sigma_pi| + r'P r.

    This equals twice the mean KL(pi || q) plus the policy-independent
    constant du - mean log|C|.
    """
    if len(sup) == 0:
        raise ValueError("empty supervision set")
    sig = np.exp(pol.log_diag_cov)
    trace = np.einsum("nii,i->n", sup.precisions, sig)
    r = pol.forward(sup.states) - sup.target_means
    quad = np.einsum("ni,nij,nj->n", r, sup.precisions, r)
    return float(np.mean(trace + quad) - np.sum(pol.log_diag_cov))


@dataclass
class TrainInfo:
    initial_loss: float
    final_loss: float
    best_epoch: int
    restarts: int = 0
    losses: list = field(default_factory=list)


def _adam_run(pol, sup, epochs, batch_size, lr, rng, beta1=0.9, beta2=0.999, eps=1e-8):
    best = pol.copy()
    best_loss = weighted_loss(pol, sup)
    init_loss = best_loss
    best_epoch = 0
    losses = [best_loss]
    params = [p for pair in zip(pol.weights, pol.biases) for p in pair]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    n = len(sup)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, gW, gb = loss_and_grad(pol, sup.states[idx], sup.target_means[idx], sup.precisions[idx])
            grads = [g for pair in zip(gW, gb) for g in pair]
            step += 1
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= beta1
                mi += (1 - beta1) * g
                vi *= beta2
                vi += (1 - beta2) * g * g
                mhat = mi / (1 - beta1 ** step)
                vhat = vi / (1 - beta2 ** step)
                p -= lr * mhat / (np.sqrt(vhat) + eps)
        loss = weighted_loss(pol, sup)
        losses.append(loss)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at epoch {epoch}")
        if loss < best_loss:
            best, best_loss, best_epoch = pol.copy(), loss, epoch
    return best, TrainInfo(init_loss, best_loss, best_epoch, losses=losses)


def train_supervised(pol: GlobalPolicy, sup: SupervisionSet, epochs: int = 100,
                     batch_size: int = 64, learning_rate: float = 1e-3,
                     rng: Optional[np.random.Generator] = None, max_restarts: int = 3):
    """Fit the policy mean with Adam on the precision-weighted squared error,
    keeping the best full-set checkpoint, then set the output covariance to
    the diagonal of the inverse mean precision.

    :returns: ``(policy, TrainInfo)``; the input policy is not modified.
    """
    if len(sup) == 0:
        raise ValueError("empty supervision set")
    rng = np.random.default_rng(0) if rng is None else rng
    lr = learning_rate
    for attempt in range(max_restarts + 1):
        try:
            with np.errstate(over="raise", invalid="raise"):
                new, info = _adam_run(pol.copy(), sup, epochs, batch_size, lr, rng)
            break
        except (DivergenceError, FloatingPointError) as exc:
            if attempt == max_restarts:
                raise DivergenceError(f"training diverged after {max_restarts} restarts") from exc
            lr *= 0.5
            log.warning("S-phase diverged (%s); restarting with lr=%.3g", exc, lr)
    info.restarts = attempt
    mean_prec = sup.precisions.mean(axis=0)
    new.log_diag_cov = np.log(np.diag(np.linalg.inv(mean_prec)))
    return new, info


def save_policy(pol: GlobalPolicy, path) -> None:
    """Binary checkpoint: magic, version, layer count, layer sizes, then
    little-endian float64 row-major weights/biases per layer and the
    log covariance diagonal."""
    sizes = pol.sizes
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        for W, b in zip(pol.weights, pol.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(pol.log_diag_cov, dtype="<f8").tobytes())


def load_policy(path) -> GlobalPolicy:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint")
    version, n = struct.unpack_from("<II", data, 4)
    if version != _FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    sizes = struct.unpack_from(f"<{n}I", data, off)
    off += 4 * n
    weights, biases = [], []

    def take(count):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float)
        off += 8 * count
        return arr

    for i in range(n - 1):
        weights.append(take(sizes[i + 1] * sizes[i]).reshape(sizes[i + 1], sizes[i]))
        biases.append(take(sizes[i + 1]))
    log_cov = take(sizes[-1])
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return GlobalPolicy(weights, biases, log_cov)
