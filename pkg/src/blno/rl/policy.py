"""Feature maps, the softmax policy, the linear critic and a small Adam."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QuadraticFeatures:
    """[s, upper-triangular products s_i s_j (i <= j), 1]; dimension d + d(d+1)/2 + 1."""

    def __init__(self, state_dim: int):
        self.state_dim = state_dim
        self._iu = np.triu_indices(state_dim)
        self.dim = state_dim + len(self._iu[0]) + 1

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(obs)
        quad = (obs[:, :, None] * obs[:, None, :])[:, self._iu[0], self._iu[1]]
        return np.concatenate([obs, quad, np.ones((len(obs), 1))], axis=1)


class IdentityFeatures:
    """Observation passed through unchanged (one-hot tabular states)."""

    def __init__(self, state_dim: int):
        self.state_dim = self.dim = state_dim

    def __call__(self, obs):
        return np.atleast_2d(np.asarray(obs, dtype=np.float64))


def features_for(env):
    if env.name in ("chain", "toy"):
        return IdentityFeatures(env.state_dim)
    return QuadraticFeatures(env.state_dim)


@dataclass
class SoftmaxPolicy:
    """pi(a|s) proportional to exp(theta_a . phi(s)); ``theta`` is flat, action-major."""

    n_actions: int
    feat_dim: int
    theta: np.ndarray = None

    def __post_init__(self):
        if self.theta is None:
            self.theta = np.zeros(self.n_actions * self.feat_dim)

    def logits(self, phi, theta=None):
        th = self.theta if theta is None else theta
        return phi @ th.reshape(self.n_actions, self.feat_dim).T

    def probs(self, phi, theta=None):
        z = self.logits(phi, theta)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def log_prob(self, phi, actions, theta=None):
        z = self.logits(phi, theta)
        m = z.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
        return z[np.arange(len(z)), actions] - lse

    def score(self, phi, actions, theta=None):
        """grad_theta log pi(a_i|s_i) per row, shape [B, n_actions * feat_dim]."""
        coef = -self.probs(phi, theta)
        coef[np.arange(len(coef)), actions] += 1.0
        return (coef[:, :, None] * phi[:, None, :]).reshape(len(phi), -1)

    def sample(self, phi, rng):
        p = self.probs(phi)
        u = rng.random(len(p))
        a = (u[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
        return np.minimum(a, self.n_actions - 1)

    def greedy(self, phi):
        return np.argmax(self.logits(phi), axis=1)


@dataclass
class LinearCritic:
    feat_dim: int
    omega: np.ndarray = None

    def __post_init__(self):
        if self.omega is None:
            self.omega = np.zeros(self.feat_dim)

    def value(self, phi, omega=None):
        return phi @ (self.omega if omega is None else omega)


@dataclass
class Adam:
    lr: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-5
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Descent step on ``grad``; returns new parameters."""
        if self.m is None:
            self.m, self.v = np.zeros_like(params), np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return params - self.lr * mh / (np.sqrt(vh) + self.eps)
