"""One-step actor-critic game on the box [-1, 1]^2.

The actor picks theta, the reward is -theta^2/5 and the critic predicts it
with V = omega * theta.

    J(theta, omega) = omega * theta                 (actor, maximized)
    g(theta, omega) = (omega*theta + theta^2/5)^2   (critic, minimized)

The best response is omega*(theta) = -theta/5. Along it dJ/dtheta = -2 theta/5,
so the only equilibrium is the origin.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass

import numpy as np

BASE_LR = 5e-2
TTSA_MULTIPLE = 4.0
REG = 0.3
INIT = (0.5, 0.5)


class ToyDynamics(str, enum.Enum):
    SIMULTANEOUS = "simultaneous"
    TTSA = "ttsa"
    STACKELBERG = "stackelberg"
    REGULARIZED = "regularized"


@dataclass(frozen=True)
class ToyState:
    theta: float
    omega: float

    @property
    def norm(self) -> float:
        return math.hypot(self.theta, self.omega)


def _box(v: float) -> float:
    return min(1.0, max(-1.0, v))


def grad_theta_J(theta, omega):
    return omega


def grad_omega_J(theta, omega):
    return theta


def grad_omega_g(theta, omega):
    return 2.0 * (omega * theta + theta * theta / 5.0) * theta


def hess_omega_g(theta, omega):
    return 2.0 * theta * theta


def hess_theta_omega_g(theta, omega):
    # d/dtheta of grad_omega_g
    return 2.0 * (omega + 2.0 * theta / 5.0) * theta + 2.0 * (omega * theta + theta * theta / 5.0)


def best_response(theta: float) -> float:
    return _box(-theta / 5.0)


def hypergradient(theta: float, omega: float, reg: float = 0.0) -> float:
    """dJ/dtheta through the critic's response, with (d2g/domega2 + reg)^{-1}."""
    b = grad_omega_J(theta, omega)
    h = hess_omega_g(theta, omega) + reg
    # h vanishes only as theta -> 0 (or underflows there); the implicit term's limit is 0
    implicit = 0.0 if b == 0.0 or h == 0.0 else hess_theta_omega_g(theta, omega) * b / h
    return grad_theta_J(theta, omega) - implicit


@dataclass(frozen=True)
class ToyConfig:
    dynamics: ToyDynamics = ToyDynamics.STACKELBERG
    base_lr: float = BASE_LR
    ttsa_multiple: float = TTSA_MULTIPLE
    reg: float = REG
    inner_steps: int = 0  # 0 means the exact best response


def _inner(theta: float, omega: float, cfg: ToyConfig) -> float:
    if cfg.inner_steps <= 0:
        return best_response(theta)
    for _ in range(cfg.inner_steps):
        omega = _box(omega - cfg.base_lr * grad_omega_g(theta, omega))
    return omega


def toy_step(state: ToyState, cfg: ToyConfig, rng=None) -> ToyState:
    """One update of the chosen dynamics; the result is projected onto the box.

    ``rng`` is accepted for interface symmetry; the game is deterministic.
    """
    th, om = state.theta, state.omega
    a = cfg.base_lr
    d = ToyDynamics(cfg.dynamics)
    if d in (ToyDynamics.SIMULTANEOUS, ToyDynamics.TTSA):
        critic_lr = a * (cfg.ttsa_multiple if d is ToyDynamics.TTSA else 1.0)
        return ToyState(_box(th + a * grad_theta_J(th, om)), _box(om - critic_lr * grad_omega_g(th, om)))
    # leader-follower: the critic responds first, then the actor ascends the hypergradient
    om = _inner(th, om, cfg)
    reg = cfg.reg if d is ToyDynamics.REGULARIZED else 0.0
    return ToyState(_box(th + a * hypergradient(th, om, reg)), om)


def toy_run(cfg: ToyConfig, steps: int, init=INIT) -> list[ToyState]:
    """Trajectory including the initial state (``steps + 1`` entries)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    s = ToyState(_box(float(init[0])), _box(float(init[1])))
    traj = [s]
    for _ in range(steps):
        s = toy_step(s, cfg)
        traj.append(s)
    return traj


def write_toy_csv(path, traj: list[ToyState]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "theta", "omega"))
        for k, s in enumerate(traj):
            w.writerow((k, repr(s.theta), repr(s.omega)))


def trajectory_array(traj: list[ToyState]) -> np.ndarray:
    return np.array([[s.theta, s.omega] for s in traj])
