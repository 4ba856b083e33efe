"""Inverse-Hessian-vector products against a matrix-free symmetric operator.

Solvers: dense exact oracle, conjugate gradient, Nystrom low-rank + Woodbury,
and CG preconditioned by the Nystrom approximation.
"""
from __future__ import annotations

import enum
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .linalg import LinalgError, cholesky, dense_inverse, sym_eig

MATERIALIZE_MAX_DIM = 2048
PINV_RELATIVE_CUTOFF = 1e-10


class SamplingMode(str, enum.Enum):
    UNIFORM = "uniform"
    DIAGONAL_SQUARED = "diagonal_squared"


class HessianOperator:
    """Symmetric operator accessed through Hessian-vector products.

    Subclasses implement ``apply``; ``column``, ``diagonal`` and
    ``materialize`` fall back to repeated applications.
    """

    dim: int

    def apply(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def column(self, j: int) -> np.ndarray:
        e = np.zeros(self.dim)
        e[j] = 1.0
        return self.apply(e)

    def columns(self, idx) -> np.ndarray:
        idx = list(idx)
        if not idx:
            return np.zeros((self.dim, 0))
        return np.stack([self.column(j) for j in idx], axis=1)

    def diagonal(self) -> np.ndarray:
        return np.array([self.column(j)[j] for j in range(self.dim)])

    def materialize(self) -> np.ndarray:
        if self.dim > MATERIALIZE_MAX_DIM:
            raise ValueError(f"refusing to materialize a {self.dim}-dimensional operator")
        m = self.columns(range(self.dim))
        return 0.5 * (m + m.T)


class DenseOperator(HessianOperator):
    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError("DenseOperator needs a square matrix")
        self.matrix = matrix
        self.dim = matrix.shape[0]

    def apply(self, v):
        return self.matrix @ v

    def column(self, j):
        return self.matrix[:, j].copy()

    def columns(self, idx):
        return self.matrix[:, list(idx)].copy()

    def diagonal(self):
        return np.diag(self.matrix).copy()

    def materialize(self):
        return self.matrix.copy()


class LinearOperator(HessianOperator):
    """Wrap a bare ``v -> Hv`` callable (and optionally a diagonal)."""

    def __init__(self, dim: int, matvec: Callable[[np.ndarray], np.ndarray],
                 diagonal: Callable[[], np.ndarray] | None = None):
        self.dim = int(dim)
        self._matvec = matvec
        self._diagonal = diagonal

    def apply(self, v):
        return np.asarray(self._matvec(np.asarray(v, dtype=np.float64)), dtype=np.float64)

    def diagonal(self):
        if self._diagonal is not None:
            return np.asarray(self._diagonal(), dtype=np.float64)
        return super().diagonal()


def symmetry_gap(op: HessianOperator, rng: np.random.Generator, trials: int = 3) -> float:
    """Largest relative |u.Hv - v.Hu| over random probes."""
    worst = 0.0
    for _ in range(trials):
        u = rng.standard_normal(op.dim)
        v = rng.standard_normal(op.dim)
        hu, hv = op.apply(u), op.apply(v)
        scale = 1.0 + np.linalg.norm(u) * np.linalg.norm(hv) + np.linalg.norm(v) * np.linalg.norm(hu)
        worst = max(worst, abs(u @ hv - v @ hu) / scale)
    return worst


@dataclass
class IhvpReport:
    solution: np.ndarray
    iterations: int
    residual_norm: float
    wall_ns: int
    method: str
    diverged: bool = False
    note: str = ""


@dataclass
class NystromSketch:
    indices: np.ndarray
    C: np.ndarray  # p x q, H[:, J]
    W: np.ndarray  # q x q, H[J, J]
    mode: SamplingMode
    op: HessianOperator | None = None
    fell_back: bool = False
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def rank(self) -> int:
        return len(self.indices)

    @property
    def dim(self) -> int:
        return self.C.shape[0]

    def approximation(self) -> np.ndarray:
        """Dense H_r = C W^+ C^T (diagnostics; eigen-thresholded pseudoinverse)."""
        if self.rank == 0:
            return np.zeros((self.dim, self.dim))
        eig = self._w_eig()
        keep = eig.eigenvalues > PINV_RELATIVE_CUTOFF * max(eig.eigenvalues[0], 0.0)
        if not keep.any():
            return np.zeros((self.dim, self.dim))
        u = eig.eigenvectors[:, keep]
        z = self.C @ u / np.sqrt(eig.eigenvalues[keep])
        return z @ z.T

    def _w_eig(self):
        if "eig" not in self._cache:
            self._cache["eig"] = sym_eig(self.W)
        return self._cache["eig"]

    def woodbury(self, rho: float) -> Callable[[np.ndarray], np.ndarray]:
        """Return ``b -> (H_r + rho I)^{-1} b``, cached per rho."""
        if rho <= 0:
            raise ValueError("Nystrom IHVP needs rho > 0")
        key = float(rho)
        if key in self._cache:
            return self._cache[key]
        keep = None
        if self.rank:
            # a successful Cholesky of W does not rule out near-singularity, so always threshold
            eig = self._w_eig()
            keep = eig.eigenvalues > PINV_RELATIVE_CUTOFF * max(eig.eigenvalues[0], 0.0)
        if keep is None or not keep.any():
            fn = lambda b: b / rho  # noqa: E731
        else:
            # Woodbury on the kept eigenbasis: H_r = Ck diag(lam)^-1 Ck^T
            ck = self.C @ eig.eigenvectors[:, keep]
            try:
                core = cholesky(rho * np.diag(eig.eigenvalues[keep]) + ck.T @ ck)
            except LinalgError as exc:
                raise LinalgError(f"Nystrom core solve failed (rho={rho}, q={self.rank}): {exc}") from exc
            fn = lambda b: (b - ck @ core.solve(ck.T @ b)) / rho  # noqa: E731
        self._cache[key] = fn
        return fn


def sample_indices(diag: np.ndarray, q: int, mode: SamplingMode | str,
                   rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Draw ``q`` distinct indices; returns (indices, fell_back_to_uniform)."""
    mode = SamplingMode(mode)
    p = len(diag)
    if not 0 <= q <= p:
        raise ValueError(f"need 0 <= q <= p, got q={q}, p={p}")
    if mode is SamplingMode.DIAGONAL_SQUARED:
        weights = np.asarray(diag, dtype=np.float64) ** 2
        if np.all(np.isfinite(weights)) and weights.sum() > 0 and np.count_nonzero(weights) >= q:
            chosen = []
            w = weights.copy()
            for _ in range(q):
                cdf = np.cumsum(w)
                i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
                i = min(i, p - 1)
                while w[i] == 0.0:  # guards against landing on a zero-width slot
                    i -= 1
                chosen.append(i)
                w[i] = 0.0
            return np.array(chosen, dtype=np.int64), False
        warnings.warn("diagonal has too few nonzero entries; sampling uniformly", RuntimeWarning, stacklevel=2)
        return rng.choice(p, size=q, replace=False).astype(np.int64), True
    return rng.choice(p, size=q, replace=False).astype(np.int64), False


def sample_columns(op: HessianOperator, q: int, mode: SamplingMode | str,
                   rng: np.random.Generator) -> NystromSketch:
    mode = SamplingMode(mode)
    diag = op.diagonal() if mode is SamplingMode.DIAGONAL_SQUARED else np.zeros(op.dim)
    idx, fell_back = sample_indices(diag, q, mode, rng)
    return sketch_from_indices(op, idx, mode, fell_back)


def sketch_from_indices(op: HessianOperator, indices, mode: SamplingMode | str = SamplingMode.UNIFORM,
                        fell_back: bool = False) -> NystromSketch:
    idx = np.asarray(indices, dtype=np.int64)
    if len(set(idx.tolist())) != len(idx) or (len(idx) and (idx.min() < 0 or idx.max() >= op.dim)):
        raise ValueError("column indices must be distinct and in range")
    C = op.columns(idx)
    W = C[idx, :]
    W = 0.5 * (W + W.T)
    return NystromSketch(idx, C, W, SamplingMode(mode), op=op, fell_back=fell_back)


def _true_residual(op: HessianOperator | None, shift: float, x: np.ndarray, b: np.ndarray) -> float:
    if op is None:
        return math.nan
    r = b - op.apply(x) - shift * x
    return float(np.linalg.norm(r))


def nystrom_ihvp(sketch: NystromSketch, rho: float, b: np.ndarray) -> IhvpReport:
    """Approximate ``(H + rho I)^{-1} b`` by ``(H_r + rho I)^{-1} b``.

    ``residual_norm`` is measured against the true operator when the sketch
    carries one.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (sketch.dim,):
        raise ValueError(f"rhs has shape {b.shape}, sketch dimension is {sketch.dim}")
    t0 = time.perf_counter_ns()
    v = sketch.woodbury(rho)(b)
    wall = time.perf_counter_ns() - t0
    bound = np.linalg.norm(b) / rho
    assert np.linalg.norm(v) <= bound * (1 + 1e-8) + 1e-300, "Nystrom IHVP violated the 1/rho operator bound"
    return IhvpReport(v, sketch.rank, _true_residual(sketch.op, rho, v, b), wall, "nystrom",
                      note="uniform-fallback" if sketch.fell_back else "")


def _pcg(op: HessianOperator, b: np.ndarray, shift: float, precond, max_iters: int, tol: float,
         method: str) -> IhvpReport:
    t0 = time.perf_counter_ns()
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return IhvpReport(x, 0, 0.0, time.perf_counter_ns() - t0, method)
    r = b.copy()
    z = precond(r)
    d = z.copy()
    rz = r @ z
    r0 = bnorm
    diverged = False
    it = 0
    while it < max_iters and np.linalg.norm(r) > tol * bnorm:
        hd = op.apply(d) + shift * d
        dhd = d @ hd
        if dhd == 0.0 or not np.isfinite(dhd):
            diverged = True
            break
        alpha = rz / dhd
        x_new = x + alpha * d
        r_new = r - alpha * hd
        if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(r_new))) or np.linalg.norm(r_new) > 1e6 * r0:
            diverged = True
            it += 1
            break
        x, r = x_new, r_new
        z = precond(r)
        rz_new = r @ z
        beta = rz_new / rz
        d = z + beta * d
        rz = rz_new
        it += 1
    resid = _true_residual(op, shift, x, b)
    if not np.isfinite(resid):
        diverged = True
    return IhvpReport(x, it, resid, time.perf_counter_ns() - t0, method, diverged=diverged)


def cg_ihvp(op: HessianOperator, b: np.ndarray, lambda_reg: float = 0.0,
            max_iters: int = 20, tol: float = 1e-10) -> IhvpReport:
    """Conjugate gradient on ``(H + lambda_reg I) v = b`` from zero.

    No re-orthogonalization. On non-finite values or residual growth beyond
    1e6 times the initial residual the last finite iterate is returned with
    ``diverged=True``.
    """
    if lambda_reg < 0:
        raise ValueError("lambda_reg must be nonnegative")
    return _pcg(op, b, lambda_reg, lambda r: r, max_iters, tol, "cg")


def nystrom_pcg(op: HessianOperator, b: np.ndarray, sketch: NystromSketch, rho: float,
                max_iters: int = 20, tol: float = 1e-10) -> IhvpReport:
    """CG on ``(H + rho I) v = b`` preconditioned by ``(H_r + rho I)^{-1}``."""
    return _pcg(op, b, rho, sketch.woodbury(rho), max_iters, tol, "nystrom_pcg")


def exact_ihvp(op: HessianOperator, rho: float, b: np.ndarray) -> np.ndarray:
    if op.dim > MATERIALIZE_MAX_DIM:
        raise ValueError(f"exact IHVP refused for dimension {op.dim} > {MATERIALIZE_MAX_DIM}")
    h = op.materialize()
    return dense_inverse(h + rho * np.eye(op.dim)) @ np.asarray(b, dtype=np.float64)


def exact_report(op: HessianOperator, rho: float, b: np.ndarray) -> IhvpReport:
    t0 = time.perf_counter_ns()
    v = exact_ihvp(op, rho, b)
    return IhvpReport(v, 0, _true_residual(op, rho, v, b), time.perf_counter_ns() - t0, "exact")


def nystrom_error_bound(M: float, rho: float, lambda_next: float, eps: float,
                        p_tilde: int, L: float) -> float:
    """Irreducible Nystrom IHVP error Psi for gradient bound M and shift rho."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    tail = lambda_next + eps * p_tilde * L**2
    return (M / rho) * tail / (tail + rho)
