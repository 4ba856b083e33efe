"""Rollout storage, GAE and the gradient estimators of the bilevel actor-critic.

Arrays are time-major, shape [T, N] (or [T, N, dim]). ``dones[t, i]`` marks
that the transition taken at step t ended an episode, so nothing is
bootstrapped through it and the next row starts a fresh episode.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ihvp import HessianOperator


@dataclass
class TrajectoryBatch:
    obs: np.ndarray  # [T, N, state_dim] (normalized observations)
    phi: np.ndarray  # [T, N, d]
    actions: np.ndarray  # [T, N]
    rewards: np.ndarray  # [T, N]
    logp: np.ndarray  # [T, N]
    values: np.ndarray  # [T, N], critic snapshot at collection time
    dones: np.ndarray  # [T, N] bool
    last_phi: np.ndarray  # [N, d], features of the state after the last step
    last_values: np.ndarray  # [N]

    def __post_init__(self):
        T, N = self.actions.shape
        for name in ("rewards", "logp", "values", "dones"):
            if getattr(self, name).shape != (T, N):
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {(T, N)}")
        if self.phi.shape[:2] != (T, N) or self.last_phi.shape[0] != N:
            raise ValueError("feature arrays do not match the batch shape")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")

    @property
    def T(self) -> int:
        return self.actions.shape[0]

    @property
    def N(self) -> int:
        return self.actions.shape[1]

    def next_phi(self) -> np.ndarray:
        return np.concatenate([self.phi[1:], self.last_phi[None]], axis=0)

    def flat(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(self.T * self.N, *x.shape[2:])


def collect_rollouts(venv, policy, critic, feature_map, T: int, rng, greedy: bool = False) -> TrajectoryBatch:
    """Roll ``venv`` forward T steps under ``policy``; snapshots log pi and V at collection time."""
    N = venv.n
    d = feature_map.dim
    obs = np.zeros((T, N, venv.env.state_dim))
    phi = np.zeros((T, N, d))
    actions = np.zeros((T, N), dtype=np.int64)
    rewards = np.zeros((T, N))
    logp = np.zeros((T, N))
    values = np.zeros((T, N))
    dones = np.zeros((T, N), dtype=bool)
    for t in range(T):
        o = venv.observe()
        f = feature_map(o)
        a = policy.greedy(f) if greedy else policy.sample(f, rng)
        obs[t], phi[t], actions[t] = o, f, a
        logp[t] = policy.log_prob(f, a)
        values[t] = critic.value(f)
        try:
            rewards[t], dones[t] = venv.step(a)
        except FloatingPointError as exc:
            raise FloatingPointError(f"{exc} at t={t}") from exc
    last_phi = feature_map(venv.observe())
    return TrajectoryBatch(obs, phi, actions, rewards, logp, values, dones, last_phi, critic.value(last_phi))


def gae_advantages(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalized advantage estimates and regression targets V + A."""
    T = rewards.shape[0]
    adv = np.zeros_like(rewards, dtype=np.float64)
    nxt_v = np.concatenate([values[1:], np.asarray(last_values)[None]], axis=0)
    notdone = 1.0 - dones.astype(np.float64)
    running = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * nxt_v[t] * notdone[t] - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
    return adv, adv + values


def gae_value_jacobian(phi, next_phi, dones, gamma: float, lam: float) -> np.ndarray:
    """d A_t / d omega for a linear critic, shape [T, N, d].

    GAE is linear in the values, so the Jacobian obeys the same recursion
    with e_t = gamma (1 - done_t) phi(s_{t+1}) - phi(s_t) in place of delta_t.
    """
    notdone = (1.0 - dones.astype(np.float64))[..., None]
    e = gamma * notdone * next_phi - phi
    out = np.zeros_like(e)
    running = np.zeros(e.shape[1:])
    for t in range(e.shape[0] - 1, -1, -1):
        running = e[t] + gamma * lam * notdone[t] * running
        out[t] = running
    return out


def normalize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / (x.std() + 1e-8)


def actor_direct_grad(scores: np.ndarray, advantages: np.ndarray) -> np.ndarray:
    """mean_i grad log pi(a_i|s_i) * A_i over flattened samples."""
    scores = scores.reshape(-1, scores.shape[-1])
    return scores.T @ advantages.reshape(-1) / len(scores)


def clip_mask(logp: np.ndarray, advantages: np.ndarray, clip_f: float) -> np.ndarray:
    """1 where log pi * A stays inside +-clip_f * std(|log pi * A|), else 0.

    Clamping the scalar log pi * A zeroes its gradient outside the band.
    ``clip_f <= 0`` disables clipping.
    """
    if clip_f <= 0:
        return np.ones_like(advantages, dtype=np.float64)
    x = logp * advantages
    band = clip_f * np.abs(x).std()
    return (np.abs(x) <= band).astype(np.float64)


def suffix_means(terms: np.ndarray, dones: np.ndarray) -> np.ndarray:
    """u_t = mean of terms[t:] up to the end of the episode (or batch), per stream.

    ``terms`` is [T, N, k]. The divisor is the number of summands (>= 1).
    """
    T = terms.shape[0]
    steps = np.arange(T)[:, None]
    # last step of the episode containing t: first done at or after t, else T - 1
    ends = np.where(dones.astype(bool), steps, T - 1)
    ends = np.minimum.accumulate(ends[::-1], axis=0)[::-1]
    tail = np.concatenate([np.cumsum(terms[::-1], axis=0)[::-1], np.zeros((1,) + terms.shape[1:])], axis=0)
    cols = np.arange(terms.shape[1])[None, :]
    sums = tail[:T] - tail[ends + 1, cols]
    count = (ends - steps + 1).astype(np.float64)
    assert count.min() >= 1.0
    return sums / count[..., None]


def cross_grad_accumulate(residuals: np.ndarray, inner: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """sum_t w_t * residual_t * inner_t, with uniform weights 1/len by default."""
    residuals = residuals.reshape(-1)
    inner = inner.reshape(len(residuals), -1)
    w = np.full(len(residuals), 1.0 / len(residuals)) if weights is None else np.asarray(weights).reshape(-1)
    return inner.T @ (w * residuals)


def suffix_score_terms(scores, logp, advantages, dones, clip_f):
    """Clipped per-step score * advantage and their within-episode suffix means, both [T, N, k]."""
    mask = clip_mask(logp, advantages, clip_f)
    terms = scores * (mask * advantages)[..., None]
    return suffix_means(terms, dones)


def critic_cross_grad(phi, targets, u, omega) -> np.ndarray:
    """(1/NT) sum (target_t - omega.phi_t) u_t: the critic loss gradient in theta."""
    phi = phi.reshape(-1, phi.shape[-1])
    return cross_grad_accumulate(targets.reshape(-1) - phi @ omega, u)


def mixed_partial_jvp(phi, u, v) -> np.ndarray:
    """d2 g / dtheta domega applied to v: -(1/NT) sum (phi_t . v) u_t."""
    phi = phi.reshape(-1, phi.shape[-1])
    u = u.reshape(len(phi), -1)
    return -(u.T @ (phi @ v)) / len(phi)


def mixed_partial_jvp_fd(phi, targets, u, omega, v, h: float = 1e-5) -> np.ndarray:
    return (critic_cross_grad(phi, targets, u, omega + h * v)
            - critic_cross_grad(phi, targets, u, omega - h * v)) / (2 * h)


class GramOperator(HessianOperator):
    """(1/B) Phi^T Phi: the Hessian of 0.5 * mean (omega.phi - target)^2."""

    def __init__(self, phi: np.ndarray):
        self.phi = phi.reshape(-1, phi.shape[-1])
        self.dim = self.phi.shape[1]
        self._n = len(self.phi)

    def apply(self, v):
        return self.phi.T @ (self.phi @ v) / self._n

    def column(self, j):
        return self.phi.T @ self.phi[:, j] / self._n

    def columns(self, idx):
        idx = list(idx)
        return self.phi.T @ self.phi[:, idx] / self._n

    def diagonal(self):
        return np.einsum("ij,ij->j", self.phi, self.phi) / self._n

    def materialize(self):
        m = self.phi.T @ self.phi / self._n
        return 0.5 * (m + m.T)


def critic_hessian_operator(phi: np.ndarray) -> GramOperator:
    return GramOperator(phi)


def critic_regression_grad(phi, targets, omega) -> np.ndarray:
    phi = phi.reshape(-1, phi.shape[-1])
    return phi.T @ (phi @ omega - targets.reshape(-1)) / len(phi)
