"""Trainers: bilevel actor-critic (Nystrom or CG hypergradient), its ablations, and PPO.

All trainers share rollout collection and GAE. They differ in the per-minibatch
update:

    blpo-nystrom / blpo-cg  nested critic regression, then actor ascent on the
                            implicit hypergradient
    nested                  nested critic regression, direct actor gradient only
    simul / ttsa            one critic step and one actor step from the same point
                            (critic lr = actor lr, or the faster critic lr)
    ppo                     clipped surrogate plus critic regression
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ..blo import CgSolver, NystromSolver
from ..linalg import make_rng
from . import estimators as est
from .config import RlConfig
from .envs import VecEnv, make_env
from .policy import Adam, LinearCritic, SoftmaxPolicy, features_for

ALGOS = ("blpo-nystrom", "blpo-cg", "nested", "simul", "ttsa", "ppo")


@dataclass
class UpdateStats:
    direct_norm: float = 0.0
    implicit_norm: float = 0.0
    implicit_clipped: int = 0
    ihvp_iters: int = 0
    minibatches: int = 0


@dataclass
class TrainerState:
    policy: SoftmaxPolicy
    critic: LinearCritic
    actor_opt: Adam
    critic_opt: Adam
    stats: list[UpdateStats] = field(default_factory=list)


def make_state(n_actions: int, feat_dim: int, cfg: RlConfig, algo: str) -> TrainerState:
    critic_lr = cfg.actor_lr if algo in ("simul",) else cfg.critic_lr
    return TrainerState(SoftmaxPolicy(n_actions, feat_dim), LinearCritic(feat_dim),
                        Adam(cfg.actor_lr), Adam(critic_lr))


def _solver(algo: str, cfg: RlConfig):
    if algo == "blpo-nystrom":
        return NystromSolver(cfg.nystrom_rank, cfg.nystrom_rho)
    if algo == "blpo-cg":
        return CgSolver(cfg.lambda_reg, cfg.max_cg_iter)
    return None


def _check(x, what):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite {what}")


def blpo_update(state: TrainerState, batch: est.TrajectoryBatch, cfg: RlConfig, rng,
                algo: str = "blpo-nystrom") -> TrainerState:
    """One round of epochs x minibatches of the bilevel actor-critic update.

    ``algo`` selects the IHVP solver ("blpo-nystrom", "blpo-cg") or an
    ablation ("nested", "simul", "ttsa").
    """
    pol, cri = state.policy, state.critic
    adv, targets = est.gae_advantages(batch.rewards, batch.values, batch.dones, batch.last_values,
                                      cfg.gamma, cfg.gae_lambda)
    T, N = batch.T, batch.N
    phi = batch.flat(batch.phi)
    acts = batch.flat(batch.actions)
    adv_f, tgt_f = adv.reshape(-1), targets.reshape(-1)
    solver = _solver(algo, cfg)
    hyper = solver is not None and cfg.ihvp_bound > 0
    if hyper:
        dA_domega = batch.flat(est.gae_value_jacobian(batch.phi, batch.next_phi(), batch.dones,
                                                      cfg.gamma, cfg.gae_lambda))
    mb_size = len(acts) // cfg.num_minibatches
    st = UpdateStats()
    for _ in range(cfg.update_epochs):
        perm = rng.permutation(len(acts))
        for k in range(cfg.num_minibatches):
            idx = perm[k * mb_size:(k + 1) * mb_size]
            ph, tg = phi[idx], tgt_f[idx]
            scores = pol.score(ph, acts[idx])
            direct = est.actor_direct_grad(scores, est.normalize(adv_f[idx]))
            if algo in ("simul", "ttsa"):
                g_critic = est.critic_regression_grad(ph, tg, cri.omega)
                cri.omega = state.critic_opt.step(cri.omega, g_critic)
                hg = direct
            else:
                for _d in range(cfg.nested_updates):
                    cri.omega = state.critic_opt.step(cri.omega, est.critic_regression_grad(ph, tg, cri.omega))
                hg = direct
                if hyper:
                    # suffix terms need whole trajectories, so they are formed on the full batch
                    all_scores = pol.score(phi, acts).reshape(T, N, -1)
                    logp = pol.log_prob(phi, acts)
                    u = est.suffix_score_terms(all_scores, logp.reshape(T, N), adv, batch.dones,
                                               cfg.clip_f).reshape(T * N, -1)
                    b = dA_domega[idx].T @ logp[idx] / len(idx)
                    rep = solver(est.critic_hessian_operator(ph), b, rng)
                    implicit = -est.mixed_partial_jvp(ph, u[idx], rep.solution)
                    dn, inn = np.linalg.norm(direct), np.linalg.norm(implicit)
                    if inn > cfg.ihvp_bound * dn:
                        implicit = implicit * (cfg.ihvp_bound * dn / inn)
                        st.implicit_clipped += 1
                    st.implicit_norm += float(np.linalg.norm(implicit))
                    st.ihvp_iters += rep.iterations
                    hg = direct + implicit
            _check(hg, "actor gradient")
            st.direct_norm += float(np.linalg.norm(direct))
            st.minibatches += 1
            pol.theta = state.actor_opt.step(pol.theta, -hg)
            _check(pol.theta, "actor parameters")
            _check(cri.omega, "critic parameters")
    state.stats.append(st)
    return state


def ppo_actor_grad(scores, ratio, adv, clip_eps):
    """Gradient of mean min(r A, clip(r, 1-eps, 1+eps) A) in theta."""
    inactive = ((adv > 0) & (ratio > 1 + clip_eps)) | ((adv < 0) & (ratio < 1 - clip_eps))
    w = np.where(inactive, 0.0, ratio * adv)
    return scores.T @ w / len(w)


def ppo_update(state: TrainerState, batch: est.TrajectoryBatch, cfg: RlConfig, rng) -> TrainerState:
    pol, cri = state.policy, state.critic
    adv, targets = est.gae_advantages(batch.rewards, batch.values, batch.dones, batch.last_values,
                                      cfg.gamma, cfg.gae_lambda)
    phi = batch.flat(batch.phi)
    acts = batch.flat(batch.actions)
    old_logp = batch.logp.reshape(-1)
    adv_f, tgt_f = adv.reshape(-1), targets.reshape(-1)
    mb_size = len(acts) // cfg.num_minibatches
    st = UpdateStats()
    for _ in range(cfg.update_epochs):
        perm = rng.permutation(len(acts))
        for k in range(cfg.num_minibatches):
            idx = perm[k * mb_size:(k + 1) * mb_size]
            ph = phi[idx]
            ratio = np.exp(pol.log_prob(ph, acts[idx]) - old_logp[idx])
            g = ppo_actor_grad(pol.score(ph, acts[idx]), ratio, est.normalize(adv_f[idx]), cfg.clip_eps)
            g_critic = cfg.vf_coef * est.critic_regression_grad(ph, tgt_f[idx], cri.omega)
            _check(g, "actor gradient")
            pol.theta = state.actor_opt.step(pol.theta, -g)
            cri.omega = state.critic_opt.step(cri.omega, g_critic)
            st.direct_norm += float(np.linalg.norm(g))
            st.minibatches += 1
    _check(pol.theta, "actor parameters")
    _check(cri.omega, "critic parameters")
    state.stats.append(st)
    return state


CURVE_COLUMNS = ("algo", "env", "seed", "env_steps", "mean_return")


@dataclass
class TrainResult:
    rows: list[tuple]
    state: TrainerState
    error: str = ""

    @property
    def returns(self) -> np.ndarray:
        return np.array([r[4] for r in self.rows], dtype=np.float64)

    def best_return(self) -> float:
        r = self.returns
        r = r[np.isfinite(r)]
        return float(r.max()) if r.size else math.nan


def train(algo: str, env_name: str, cfg: RlConfig, seed: int | None = None, csv_path=None,
          log_every: int = 0, logger=None) -> TrainResult:
    """Run ``cfg.num_updates`` rounds; one learning-curve row per round.

    Rows are written to ``csv_path`` as they are produced, so an aborted run
    leaves the rows up to the failure.
    """
    if algo not in ALGOS:
        raise ValueError(f"unknown algo {algo!r}; choose from {', '.join(ALGOS)}")
    seed = cfg.seed if seed is None else seed
    env = make_env(env_name)
    fmap = features_for(env)
    venv = VecEnv(env, cfg.num_envs, make_rng(seed, stream=1), cfg.gamma, cfg.normalize_env)
    act_rng, upd_rng = make_rng(seed, stream=2), make_rng(seed, stream=3)
    state = make_state(env.action_count, fmap.dim, cfg, algo)
    rows: list[tuple] = []
    fh = open(csv_path, "w", newline="") if csv_path else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(CURVE_COLUMNS)
    error = ""
    try:
        for u in range(cfg.num_updates):
            batch = collect_batch(venv, state, fmap, cfg, act_rng)
            if algo == "ppo":
                ppo_update(state, batch, cfg, upd_rng)
            else:
                blpo_update(state, batch, cfg, upd_rng, algo)
            row = (algo, env_name, seed, (u + 1) * cfg.batch_size, venv.mean_return())
            rows.append(row)
            if writer:
                writer.writerow(row[:4] + (repr(row[4]),))
                fh.flush()
            if logger and log_every and (u + 1) % log_every == 0:
                logger.info("%s seed %d: %d steps, mean return %.1f", algo, seed, row[3], row[4])
    except FloatingPointError as exc:
        error = f"update {len(rows)}: {exc}"
    finally:
        if fh:
            fh.close()
    return TrainResult(rows, state, error)


def collect_batch(venv, state, fmap, cfg, rng):
    return est.collect_rollouts(venv, state.policy, state.critic, fmap, cfg.rollout_len, rng)


AGG_COLUMNS = ("algo", "env", "env_steps", "mean", "ci_low", "ci_high", "n_seeds")


def aggregate(curves: list[list[tuple]]) -> list[tuple]:
    """Mean and normal-approximation 95% interval across seeds at shared env_steps."""
    table: dict[tuple, list[float]] = {}
    for rows in curves:
        for algo, env, _seed, steps, ret in rows:
            table.setdefault((algo, env, int(steps)), []).append(float(ret))
    out = []
    for (algo, env, steps), vals in sorted(table.items()):
        v = np.array([x for x in vals if np.isfinite(x)])
        if v.size == 0:
            out.append((algo, env, steps, math.nan, math.nan, math.nan, 0))
            continue
        m = float(v.mean())
        half = 1.96 * float(v.std(ddof=1)) / math.sqrt(v.size) if v.size > 1 else 0.0
        out.append((algo, env, steps, m, m - half, m + half, int(v.size)))
    return out


def read_curve_csv(path) -> list[tuple]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        return [(row["algo"], row["env"], int(row["seed"]), int(row["env_steps"]), float(row["mean_return"]))
                for row in r]


def write_aggregate_csv(path, rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGG_COLUMNS)
        for r in rows:
            w.writerow(r[:3] + tuple(repr(x) for x in r[3:6]) + (r[6],))
