"""Closed-form bilevel test family.

    g(x, y) = 1/2 y^T A y - x^T B y + mu_extra/2 |y|^2
    f(x, y) = 1/2 |y - y_target|^2 + c * sum_i sin(x_i)^2

With A' = A + mu_extra I:
    y*(x)      = A'^{-1} B^T x
    Phi(x)     = 1/2 |A'^{-1} B^T x - y_target|^2 + c sum sin^2(x_i)
    grad Phi   = c sin(2x) + B A'^{-1} (y*(x) - y_target)
    d2g/dxdy   = -B

A is Q diag(lam) Q^T with a geometric spectrum from ``scale`` down to
``scale / kappa`` and Q a seeded random orthogonal matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..blo import BilevelProblem
from ..ihvp import DenseOperator
from ..linalg import dense_inverse, make_rng, operator_norm, sym_eig


@dataclass
class QuadraticOracle:
    A: np.ndarray  # includes mu_extra
    B: np.ndarray  # m x n
    y_target: np.ndarray
    c: float
    L: float
    mu: float
    problem: BilevelProblem

    @property
    def kappa(self) -> float:
        return self.L / self.mu

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def n(self) -> int:
        return self.B.shape[1]

    def y_star(self, x):
        return self.problem.y_star(x)

    def phi(self, x) -> float:
        return self.problem.f_value(x, self.y_star(x))

    def grad_phi(self, x):
        return self.problem.hypergrad(x)

    def response_matrix(self) -> np.ndarray:
        """A'^{-1} B^T, the Jacobian of y*(x)."""
        return np.linalg.solve(self.A, self.B.T)


def _random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def build_oracle(A: np.ndarray, B: np.ndarray, y_target: np.ndarray, c: float = 0.1) -> QuadraticOracle:
    A = 0.5 * (A + A.T)
    m, n = B.shape
    A_inv = dense_inverse(A)
    eig = sym_eig(A)
    mu = float(eig.eigenvalues[-1])
    if mu <= 0:
        raise ValueError("inner Hessian must be positive definite")
    # joint Hessian of g in (x, y) and the Hessian bound of f give the gradient Lipschitz constant
    joint = np.block([[np.zeros((m, m)), -B], [-B.T, A]])
    L = max(operator_norm(joint), 1.0, 2.0 * abs(c))
    op = DenseOperator(A)

    def f_value(x, y):
        d = y - y_target
        return 0.5 * float(d @ d) + c * float(np.sum(np.sin(x) ** 2))

    def y_star(x):
        return A_inv @ (B.T @ x)

    def hypergrad(x):
        return c * np.sin(2 * x) + B @ (A_inv @ (y_star(x) - y_target))

    problem = BilevelProblem(
        m=m,
        n=n,
        grad_x_f=lambda x, y: c * np.sin(2 * x),
        grad_y_f=lambda x, y: y - y_target,
        grad_y_g=lambda x, y: A @ y - B.T @ x,
        hess_yy_g=lambda x, y: op,
        jvp_xy_g=lambda x, y, v: -(B @ v),
        f_value=f_value,
        mu=mu,
        y_star=y_star,
        hypergrad=hypergrad,
    )
    return QuadraticOracle(A, B, np.asarray(y_target, dtype=np.float64), c, L, mu, problem)


def make_quadratic(m: int = 4, n: int = 16, kappa: float = 20.0, seed: int = 0, c: float = 0.1,
                   mu_extra: float = 0.0, coupling: float = 1.0, target_scale: float = 1.0,
                   scale: float = 1.0) -> QuadraticOracle:
    """Random member of the family with inner condition number ``kappa``.

    ``coupling`` sets the operator norm of B relative to lambda_min(A').
    """
    rng = make_rng(seed, stream=101)
    lam = scale * np.geomspace(1.0, 1.0 / kappa, n) - mu_extra
    q = _random_orthogonal(rng, n)
    A = (q * lam) @ q.T + mu_extra * np.eye(n)
    B = rng.standard_normal((m, n))
    B *= coupling * (scale / kappa) / np.linalg.norm(B, 2)
    y_target = target_scale * rng.standard_normal(n) / np.sqrt(n)
    return build_oracle(A, B, y_target, c)



def convergence_preset(seed: int = 0, kappa: float = 20.0, x0_scale: float = 0.004):
    """Zero-target instance started close to the optimum at x = 0.

    With outer step 1/(8 L_phi) the running mean of squared hypergradients
    over K steps is at most about 16 L_phi (Phi(x0) - min Phi) / K, so a
    small starting gap is what lets the mean fall under a fixed threshold.
    Returns (oracle, x0).
    """
    o = make_quadratic(4, 16, kappa, seed, target_scale=0.0)
    x0 = x0_scale * make_rng(seed, stream=103).standard_normal(o.m)
    return o, x0
