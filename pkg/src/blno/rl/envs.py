"""Batched environments with functional state.

Each environment steps ``n`` independent copies at once:
``reset(rng, n) -> states`` and ``step(states, actions, rng) -> (next, rewards, terminated)``.
Time limits and automatic resets live in :class:`VecEnv`.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np

from ..verify import TabularMdp, chain_mdp


class CartPole:
    """Cart-pole balancing with explicit Euler integration; reward 1 per step."""

    name = "cartpole"
    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5  # half the pole length
    force_mag = 10.0
    tau = 0.02
    x_threshold = 2.4
    theta_threshold = 12 * 2 * math.pi / 360
    state_dim = 4
    action_count = 2
    horizon = 500

    def reset(self, rng, n):
        return rng.uniform(-0.05, 0.05, size=(n, 4))

    def step(self, states, actions, rng=None):
        x, x_dot, th, th_dot = states.T
        force = np.where(np.asarray(actions) == 1, self.force_mag, -self.force_mag)
        cos, sin = np.cos(th), np.sin(th)
        total_mass = self.masscart + self.masspole
        pml = self.masspole * self.length
        temp = (force + pml * th_dot**2 * sin) / total_mass
        th_acc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos**2 / total_mass))
        x_acc = temp - pml * th_acc * cos / total_mass
        nxt = np.stack([x + self.tau * x_dot, x_dot + self.tau * x_acc,
                        th + self.tau * th_dot, th_dot + self.tau * th_acc], axis=1)
        done = (np.abs(nxt[:, 0]) > self.x_threshold) | (np.abs(nxt[:, 2]) > self.theta_threshold)
        return nxt, np.ones(len(states)), done


class TabularEnv:
    """Sampling wrapper around a :class:`TabularMdp`; observations are one-hot."""

    name = "chain"

    def __init__(self, mdp: TabularMdp | None = None, horizon: int = 100):
        self.mdp = chain_mdp() if mdp is None else mdp
        self.horizon = horizon
        self.state_dim = self.mdp.n_states
        self.action_count = self.mdp.n_actions
        self._cdf = np.cumsum(self.mdp.P, axis=2)

    def _obs(self, idx):
        return np.eye(self.mdp.n_states)[idx]

    def reset(self, rng, n):
        return self._obs(rng.choice(self.mdp.n_states, size=n, p=self.mdp.rho0))

    def step(self, states, actions, rng):
        s = np.argmax(states, axis=1)
        a = np.asarray(actions)
        u = rng.random(len(s))
        nxt = (u[:, None] > self._cdf[s, a]).sum(axis=1)
        nxt = np.minimum(nxt, self.mdp.n_states - 1)
        return self._obs(nxt), self.mdp.R[s, a], np.zeros(len(s), dtype=bool)


class ToyBandit:
    """One-step game: the action picks theta on a grid over [-1, 1], reward -theta^2/5."""

    name = "toy"
    state_dim = 1
    horizon = 1

    def __init__(self, n_actions: int = 21):
        self.grid = np.linspace(-1.0, 1.0, n_actions)
        self.action_count = n_actions

    def reset(self, rng, n):
        return np.ones((n, 1))

    def step(self, states, actions, rng=None):
        th = self.grid[np.asarray(actions)]
        return states.copy(), -th * th / 5.0, np.ones(len(states), dtype=bool)


ENVIRONMENTS = {"cartpole": CartPole, "chain": TabularEnv, "toy": ToyBandit}


def make_env(name: str):
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


class RunningMeanStd:
    """Parallel-update running mean and variance."""

    def __init__(self, shape=()):
        self.mean = np.zeros(shape)
        self.var = np.ones(shape)
        self.count = 1e-4

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        bm, bv, bn = x.mean(axis=0), x.var(axis=0), x.shape[0]
        delta = bm - self.mean
        tot = self.count + bn
        self.mean = self.mean + delta * bn / tot
        m2 = self.var * self.count + bv * bn + delta**2 * self.count * bn / tot
        self.var = m2 / tot
        self.count = tot


class VecEnv:
    """``n`` copies with time limits, auto-reset and optional normalization.

    Observations are standardized by running statistics and clipped to
    [-10, 10]; rewards are divided by the running std of the discounted
    return. Episode returns are always tracked on raw rewards.
    """

    def __init__(self, env, n: int, rng, gamma: float = 0.99, normalize: bool = False,
                 history: int = 20):
        self.env, self.n, self.rng = env, n, rng
        self.gamma, self.normalize = gamma, normalize
        self.states = env.reset(rng, n)
        self.t = np.zeros(n, dtype=np.int64)
        self.ep_return = np.zeros(n)
        self.completed: deque[float] = deque(maxlen=history)
        self.episodes = 0
        self.obs_rms = RunningMeanStd((env.state_dim,))
        self.ret_rms = RunningMeanStd(())
        self.disc_return = np.zeros(n)
        if normalize:
            self.obs_rms.update(self.states)

    def observe(self, states=None):
        s = self.states if states is None else states
        if not self.normalize:
            return s.copy()
        return np.clip((s - self.obs_rms.mean) / np.sqrt(self.obs_rms.var + 1e-8), -10.0, 10.0)

    def step(self, actions):
        """Returns (rewards used for learning, done flags); done covers time-outs too."""
        nxt, r, term = self.env.step(self.states, actions, self.rng)
        if not np.all(np.isfinite(nxt)) or not np.all(np.isfinite(r)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(np.c_[nxt, r]), axis=1))[0])
            raise FloatingPointError(f"environment {bad} produced a non-finite transition")
        self.t += 1
        self.ep_return += r
        done = term | (self.t >= self.env.horizon)
        learn_r = r
        if self.normalize:
            self.disc_return = self.disc_return * self.gamma + r
            self.ret_rms.update(self.disc_return)
            learn_r = r / np.sqrt(self.ret_rms.var + 1e-8)
            self.disc_return = np.where(done, 0.0, self.disc_return)
        for i in np.flatnonzero(done):
            self.completed.append(float(self.ep_return[i]))
            self.episodes += 1
        if done.any():
            fresh = self.env.reset(self.rng, int(done.sum()))
            nxt = nxt.copy()
            nxt[done] = fresh
            self.t[done] = 0
            self.ep_return[done] = 0.0
        self.states = nxt
        if self.normalize:
            self.obs_rms.update(nxt)
        return learn_r, done

    def mean_return(self) -> float:
        return float(np.mean(self.completed)) if self.completed else math.nan
