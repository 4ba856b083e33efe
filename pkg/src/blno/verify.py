"""Exact oracles on enumerable MDPs and the checks built on them.

Occupancies are (1 - gamma)-normalized everywhere, so with that convention

    grad_theta V(s) = 1/(1 - gamma) * sum_{s'} d_s(s') sum_a pi(a|s') grad log pi(a|s') Q(s', a)

and the critic-loss gradient with the outer occupancy held fixed is

    sum_s d(s) (V(s) - omega.phi(s)) grad_theta V(s).

The policy here is its own softmax so that the rl module can be checked
against it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .linalg import make_rng, sym_eig


@dataclass(frozen=True)
class TabularMdp:
    P: np.ndarray  # [S, A, S']
    R: np.ndarray  # [S, A]
    gamma: float
    rho0: np.ndarray  # [S]

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if np.abs(self.P.sum(axis=2) - 1.0).max() > 1e-12 or (self.P < 0).any():
            raise ValueError("transition rows must be probability vectors")
        if abs(self.rho0.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution must sum to one")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def chain_mdp(slip: float = 0.1, gamma: float = 0.9) -> TabularMdp:
    """Three states in a row, actions left/right; a move slips the other way with prob ``slip``.

    Reward 1 for pushing right from the right end, 0 otherwise.
    """
    S, A = 3, 2
    P = np.zeros((S, A, S))
    for s in range(S):
        left, right = max(s - 1, 0), min(s + 1, S - 1)
        P[s, 0, left] += 1 - slip
        P[s, 0, right] += slip
        P[s, 1, right] += 1 - slip
        P[s, 1, left] += slip
    R = np.zeros((S, A))
    R[S - 1, 1] = 1.0
    return TabularMdp(P, R, gamma, np.full(S, 1.0 / S))


def one_hot_features(n: int) -> np.ndarray:
    return np.eye(n)


def policy_probs(theta: np.ndarray, pfeat: np.ndarray, n_actions: int) -> np.ndarray:
    """pi[s, a] proportional to exp(theta_a . pfeat[s]); ``theta`` is flat, action-major."""
    logits = pfeat @ theta.reshape(n_actions, -1).T
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def score(theta, pfeat, n_actions) -> np.ndarray:
    """grad_theta log pi(a|s) as an array [S, A, dim theta]."""
    pi = policy_probs(theta, pfeat, n_actions)
    S, d = pfeat.shape
    out = np.zeros((S, n_actions, n_actions * d))
    for s in range(S):
        for a in range(n_actions):
            coef = -pi[s].copy()
            coef[a] += 1.0
            out[s, a] = np.outer(coef, pfeat[s]).ravel()
    return out


def _p_pi(mdp, pi):
    return np.einsum("sa,sat->st", pi, mdp.P), np.einsum("sa,sa->s", pi, mdp.R)


def exact_policy_eval(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    P, r = _p_pi(mdp, pi)
    M = np.eye(mdp.n_states) - mdp.gamma * P
    V = np.linalg.solve(M, r)
    resid = np.abs(M @ V - r).max()
    if not np.isfinite(resid) or resid > 1e-10 * (1 + np.abs(r).max()):
        raise ArithmeticError(f"policy evaluation residual {resid:.3e}")
    return V


def exact_q(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    return mdp.R + mdp.gamma * mdp.P @ exact_policy_eval(mdp, pi)


def value_iteration(mdp: TabularMdp, pi: np.ndarray, sweeps: int = 10_000) -> np.ndarray:
    P, r = _p_pi(mdp, pi)
    V = np.zeros(mdp.n_states)
    for _ in range(sweeps):
        V_new = r + mdp.gamma * P @ V
        if np.array_equal(V_new, V):
            break
        V = V_new
    return V


def exact_occupancy(mdp: TabularMdp, pi: np.ndarray, rho0: np.ndarray | None = None) -> np.ndarray:
    P, _ = _p_pi(mdp, pi)
    start = mdp.rho0 if rho0 is None else np.asarray(rho0, dtype=np.float64)
    M = np.eye(mdp.n_states) - mdp.gamma * P
    return (1.0 - mdp.gamma) * np.linalg.solve(M.T, start)


def exact_critic_loss(mdp, theta, omega, features, pfeat=None, occupancy=None) -> float:
    """0.5 sum_s d(s) (V^pi(s) - omega.phi(s))^2; ``occupancy`` freezes d."""
    pfeat = features if pfeat is None else pfeat
    pi = policy_probs(theta, pfeat, mdp.n_actions)
    d = exact_occupancy(mdp, pi) if occupancy is None else occupancy
    err = exact_policy_eval(mdp, pi) - features @ omega
    return 0.5 * float(d @ (err * err))


def value_gradients(mdp, theta, pfeat) -> np.ndarray:
    """grad_theta V^pi(s) for every s, shape [S, dim theta], via per-start occupancies."""
    A = mdp.n_actions
    pi = policy_probs(theta, pfeat, A)
    Q = exact_q(mdp, pi)
    sc = score(theta, pfeat, A)
    per_state = np.einsum("sa,sa,sak->sk", pi, Q, sc)
    out = np.zeros((mdp.n_states, len(theta)))
    for s in range(mdp.n_states):
        d_s = exact_occupancy(mdp, pi, np.eye(mdp.n_states)[s])
        out[s] = d_s @ per_state / (1.0 - mdp.gamma)
    return out


def thm4_gradient_exact(mdp, theta, omega, features, pfeat=None) -> np.ndarray:
    pfeat = features if pfeat is None else pfeat
    pi = policy_probs(theta, pfeat, mdp.n_actions)
    d = exact_occupancy(mdp, pi)
    resid = exact_policy_eval(mdp, pi) - features @ omega
    return (d * resid) @ value_gradients(mdp, theta, pfeat)


def fd_critic_loss_gradient(mdp, theta, omega, features, pfeat=None, h: float = 1e-6) -> np.ndarray:
    """Central differences in theta with the outer occupancy frozen at ``theta``."""
    pfeat = features if pfeat is None else pfeat
    d = exact_occupancy(mdp, policy_probs(theta, pfeat, mdp.n_actions))
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (exact_critic_loss(mdp, theta + e, omega, features, pfeat, d)
                - exact_critic_loss(mdp, theta - e, omega, features, pfeat, d)) / (2 * h)
    return g


@dataclass
class Thm5Result:
    hessian: np.ndarray
    mu: float
    strongly_convex: bool


def td_pair_weights(mdp, pi, gamma=None):
    """Enumerated (s, s', weight, reward) for s ~ d, a ~ pi, s' ~ P."""
    g = mdp.gamma if gamma is None else gamma
    d = exact_occupancy(mdp, pi)
    pairs = []
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            for t in range(mdp.n_states):
                w = d[s] * pi[s, a] * mdp.P[s, a, t]
                if w > 0:
                    pairs.append((s, t, w, mdp.R[s, a]))
    return pairs, g


def thm5_hessian(mdp, pi, features, gamma=None, tol: float = 1e-10) -> Thm5Result:
    pairs, g = td_pair_weights(mdp, pi, gamma)
    n = features.shape[1]
    H = np.zeros((n, n))
    for s, t, w, _ in pairs:
        dphi = features[s] - g * features[t]
        H += w * np.outer(dphi, dphi)
    return _thm5(H, tol)


def thm5_hessian_batch(phi, phi_next, gamma, dones=None, tol: float = 1e-10) -> Thm5Result:
    mask = 1.0 if dones is None else (1.0 - np.asarray(dones, dtype=np.float64))[:, None]
    dphi = phi - gamma * mask * phi_next
    return _thm5(dphi.T @ dphi / len(dphi), tol)


def _thm5(H, tol):
    H = 0.5 * (H + H.T)
    mu = float(sym_eig(H).eigenvalues[-1])
    return Thm5Result(H, mu, mu > tol)


def td_loss(mdp, pi, features, omega, gamma=None) -> float:
    pairs, g = td_pair_weights(mdp, pi, gamma)
    total = 0.0
    for s, t, w, r in pairs:
        e = omega @ (features[s] - g * features[t]) - r
        total += 0.5 * w * e * e
    return total


def fd_hessian(fun, x, h: float = 1e-4) -> np.ndarray:
    n = len(x)
    H = np.zeros((n, n))
    E = np.eye(n) * h
    for i in range(n):
        for j in range(i, n):
            H[i, j] = H[j, i] = (fun(x + E[i] + E[j]) - fun(x + E[i] - E[j])
                                 - fun(x - E[i] + E[j]) + fun(x - E[i] - E[j])) / (4 * h * h)
    return H


def warm_start_check(oracle, n_pairs: int, rng) -> tuple[float, float]:
    """Largest |y*(x) - y*(x')| / |x - x'| over random pairs, with the bound L/mu."""
    worst = 0.0
    for _ in range(n_pairs):
        x, x2 = rng.standard_normal(oracle.m), rng.standard_normal(oracle.m)
        dx = np.linalg.norm(x - x2)
        if dx == 0:
            continue
        worst = max(worst, np.linalg.norm(oracle.y_star(x) - oracle.y_star(x2)) / dx)
    return float(worst), oracle.L / oracle.mu


@dataclass
class Check:
    name: str
    max_error: float
    bound: float
    passed: bool


def _rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def run_checks(seed: int = 0, tolerance_scale: float = 1.0) -> list[Check]:
    """Every registered check; ``tolerance_scale`` multiplies each bound."""
    from .problems.quadratic import make_quadratic
    from .rl.estimators import cross_grad_accumulate

    rng = make_rng(seed, stream=300)
    mdp = chain_mdp()
    feats = one_hot_features(mdp.n_states)
    dim = mdp.n_actions * feats.shape[1]
    checks = []

    def add(name, err, bound):
        bound *= tolerance_scale
        checks.append(Check(name, float(err), bound, bool(np.isfinite(err) and err <= bound)))

    uniform = np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
    add("policy_eval_vs_value_iteration",
        np.abs(exact_policy_eval(mdp, uniform) - value_iteration(mdp, uniform)).max(), 1e-8)
    add("occupancy_sums_to_one", abs(exact_occupancy(mdp, uniform).sum() - 1.0), 1e-10)

    worst4 = worst_cons = 0.0
    for _ in range(10):
        theta, omega = rng.standard_normal(dim), rng.standard_normal(feats.shape[1])
        g = thm4_gradient_exact(mdp, theta, omega, feats)
        worst4 = max(worst4, _rel_err(g, fd_critic_loss_gradient(mdp, theta, omega, feats)))
        pi = policy_probs(theta, feats, mdp.n_actions)
        resid = exact_policy_eval(mdp, pi) - feats @ omega
        acc = cross_grad_accumulate(resid, value_gradients(mdp, theta, feats), exact_occupancy(mdp, pi))
        worst_cons = max(worst_cons, _rel_err(acc, g))
    add("thm4_exact_vs_fd", worst4, 1e-5)
    add("cross_grad_enumerated_vs_thm4", worst_cons, 1e-8)

    pi = policy_probs(rng.standard_normal(dim), feats, mdp.n_actions)
    t5 = thm5_hessian(mdp, pi, feats)
    fd = fd_hessian(lambda w: td_loss(mdp, pi, feats, w), rng.standard_normal(feats.shape[1]))
    add("thm5_hessian_vs_fd", np.abs(t5.hessian - fd).max(), 1e-6)
    add("thm5_mu_positive", 0.0 if t5.strongly_convex else math.inf, 0.0)
    add("thm5_mu_vs_fd_lambda_min", abs(t5.mu - float(sym_eig(fd).eigenvalues[-1])), 1e-6)

    oracle = make_quadratic(kappa=20.0, seed=seed)
    ratio, bound = warm_start_check(oracle, 100, rng)
    add("lemma1_warm_start_ratio", max(ratio - bound, 0.0), 1e-9)
    return checks


REPORT_COLUMNS = ("check_name", "max_error", "bound", "pass")


def write_report_csv(path, checks: list[Check]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for c in checks:
            w.writerow((c.name, repr(c.max_error), repr(c.bound), "true" if c.passed else "false"))
