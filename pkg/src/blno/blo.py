"""Nested gradient descent for bilevel problems with implicit hypergradients.

    min_x  Phi(x) = f(x, y*(x))    s.t.  y*(x) = argmin_y g(x, y)

Each outer step runs ``inner_iters`` gradient steps on g (optionally warm
started from the previous inner iterate), solves the inverse-Hessian-vector
product ``v ~ (d2g/dy2)^{-1} df/dy`` and moves x along
``df/dx - (d2g/dxdy) v``.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ihvp import (
    HessianOperator,
    IhvpReport,
    SamplingMode,
    cg_ihvp,
    exact_report,
    nystrom_ihvp,
    sample_columns,
)

Vec = np.ndarray


@dataclass
class BilevelProblem:
    m: int
    n: int
    grad_x_f: Callable[[Vec, Vec], Vec]
    grad_y_f: Callable[[Vec, Vec], Vec]
    grad_y_g: Callable[[Vec, Vec], Vec]
    hess_yy_g: Callable[[Vec, Vec], HessianOperator]
    jvp_xy_g: Callable[[Vec, Vec, Vec], Vec]  # (x, y, v) -> d2g/dxdy @ v, an m-vector
    f_value: Callable[[Vec, Vec], float]
    mu: float = 0.0  # declared strong-convexity constant of g in y
    y_star: Callable[[Vec], Vec] | None = None
    hypergrad: Callable[[Vec], Vec] | None = None


class ExactSolver:
    tag = "exact"

    def __init__(self, rho: float = 0.0):
        self.rho = rho

    def __call__(self, op, b, rng):
        return exact_report(op, self.rho, b)


class CgSolver:
    tag = "cg"

    def __init__(self, lambda_reg: float = 0.0, max_iters: int = 20, tol: float = 1e-10):
        self.lambda_reg, self.max_iters, self.tol = lambda_reg, max_iters, tol

    def __call__(self, op, b, rng):
        return cg_ihvp(op, b, self.lambda_reg, self.max_iters, self.tol)


class NystromSolver:
    tag = "nystrom"

    def __init__(self, rank: int, rho: float, mode: SamplingMode | str = SamplingMode.UNIFORM):
        if rho <= 0:
            raise ValueError("the Nystrom solver needs rho > 0")
        self.rank, self.rho, self.mode = rank, rho, SamplingMode(mode)

    def __call__(self, op, b, rng):
        # fresh sketch at every call: the Hessian moves with (x, y)
        sketch = sample_columns(op, min(self.rank, op.dim), self.mode, rng)
        return nystrom_ihvp(sketch, self.rho, b)


@dataclass
class BloConfig:
    outer_lr: float
    inner_lr: float
    outer_iters: int
    inner_iters: int
    solver: Callable = field(default_factory=ExactSolver)
    warm_start: bool = True
    target_eps: float = 1e-6
    record_every: int = 1
    stationarity_c: float = 1.0

    def __post_init__(self):
        if self.outer_lr < 0 or self.inner_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.outer_iters < 1 or self.inner_iters < 1:
            raise ValueError("outer_iters and inner_iters must be >= 1")


@dataclass
class IterRecord:
    k: int
    x: Vec
    y: Vec
    hypergrad_norm_sq: float
    inner_grad_norm: float
    ihvp_iters: int
    ihvp_residual: float
    wall_ns: int


@dataclass
class BloRunRecord:
    rows: list[IterRecord] = field(default_factory=list)
    norms_sq: list[float] = field(default_factory=list)  # every iteration, not only recorded ones
    inner_grad_evals: int = 0
    x_final: Vec | None = None
    y_final: Vec | None = None
    final_inner_grad_norm: float = math.nan
    stationary: bool = False
    error: str = ""

    @property
    def running_mean(self) -> float:
        return float(np.mean(self.norms_sq)) if self.norms_sq else math.nan

    def first_below(self, threshold: float) -> int | None:
        for k, v in enumerate(self.norms_sq):
            if v <= threshold:
                return k
        return None

    CSV_COLUMNS = ("k", "hypergrad_norm_sq", "inner_grad_norm", "ihvp_iters", "ihvp_residual", "wall_ns")

    def write_csv(self, path, record_timing: bool = False) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_COLUMNS)
            for r in self.rows:
                w.writerow([r.k, repr(r.hypergrad_norm_sq), repr(r.inner_grad_norm), r.ihvp_iters,
                            repr(r.ihvp_residual), r.wall_ns if record_timing else 0])


def inner_descent(problem: BilevelProblem, x: Vec, y0: Vec, steps: int, lr: float) -> tuple[Vec, float]:
    y = np.array(y0, dtype=np.float64)
    for d in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):  # reported below
            y = y - lr * problem.grad_y_g(x, y)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"inner iterate became non-finite at step {d}")
    return y, float(np.linalg.norm(problem.grad_y_g(x, y)))


def hypergradient(problem: BilevelProblem, x: Vec, y: Vec, solver,
                  rng: np.random.Generator | None = None) -> tuple[Vec, IhvpReport]:
    b = problem.grad_y_f(x, y)
    gx = problem.grad_x_f(x, y)
    if not np.any(b):
        return gx, IhvpReport(np.zeros_like(b), 0, 0.0, 0, getattr(solver, "tag", "?"))
    try:
        rep = solver(problem.hess_yy_g(x, y), b, rng)
    except Exception as exc:
        raise RuntimeError(f"IHVP solver {getattr(solver, 'tag', solver)!r} failed at x={x}: {exc}") from exc
    return gx - problem.jvp_xy_g(x, y, rep.solution), rep


def solve(problem: BilevelProblem, config: BloConfig, rng: np.random.Generator,
          x0: Vec | None = None, y0: Vec | None = None) -> BloRunRecord:
    x = np.zeros(problem.m) if x0 is None else np.array(x0, dtype=np.float64)
    y_init = np.zeros(problem.n) if y0 is None else np.array(y0, dtype=np.float64)
    y = y_init
    rec = BloRunRecord()
    for k in range(config.outer_iters):
        t0 = time.perf_counter_ns()
        start = y if (config.warm_start and k > 0) else y_init
        try:
            y, gnorm = inner_descent(problem, x, start, config.inner_iters, config.inner_lr)
            rec.inner_grad_evals += config.inner_iters + 1
            hg, rep = hypergradient(problem, x, y, config.solver, rng)
            if not np.all(np.isfinite(hg)):
                raise FloatingPointError("hypergradient is non-finite")
        except (FloatingPointError, RuntimeError) as exc:
            rec.error = f"outer iteration {k}: {exc}"
            break
        nsq = float(hg @ hg)
        rec.norms_sq.append(nsq)
        rec.final_inner_grad_norm = gnorm
        if k % config.record_every == 0 or k == config.outer_iters - 1:
            rec.rows.append(IterRecord(k, x.copy(), y.copy(), nsq, gnorm, rep.iterations,
                                       rep.residual_norm, time.perf_counter_ns() - t0))
        x = x - config.outer_lr * hg
    rec.x_final, rec.y_final = x, y
    if rec.norms_sq and not rec.error:
        eps = config.target_eps
        inner_ok = rec.final_inner_grad_norm <= math.sqrt(2.0 * problem.mu * config.stationarity_c * eps)
        rec.stationary = bool(min(rec.norms_sq) <= eps and inner_ok)
    return rec


@dataclass(frozen=True)
class Schedule:
    outer_lr: float
    inner_lr: float
    inner_iters: int
    L_phi: float


def hypergradient_lipschitz(L: float, mu: float, tau: float, M: float, rho: float = 0.0) -> float:
    s = mu + rho
    return (L + (2 * L**2 + tau * M**2) / s + (2 * tau * L * M + L**3) / s**2
            + tau * L**2 * M / s**3)


def recommended_schedule(L: float, mu: float, tau: float, M: float, rho: float = 0.0) -> Schedule:
    """Step sizes and inner iteration count from the convergence analysis.

    inner_lr = 1/L, outer_lr = 1/(8 L_phi), inner_iters = ceil(kappa ln 4).
    """
    L_phi = hypergradient_lipschitz(L, mu, tau, M, rho)
    kappa = L / mu
    d = max(1, math.ceil(kappa * math.log(4.0) - 1e-12))
    return Schedule(1.0 / (8.0 * L_phi), 1.0 / L, d, L_phi)
