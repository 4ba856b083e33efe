"""Dense symmetric linear algebra and seeded random streams.

Everything works on float64 numpy arrays. Symmetric eigenproblems up to
``JACOBI_MAX_DIM`` use cyclic Jacobi rotations; larger ones go to LAPACK.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

JACOBI_MAX_DIM = 128
JITTER_START = 1e-12
JITTER_MAX = 1e-6


class LinalgError(ArithmeticError):
    """Raised when a dense factorization or iteration cannot produce a valid result."""


class NotPositiveDefiniteWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns, orthonormal

    def reconstruct(self) -> np.ndarray:
        q, lam = self.eigenvectors, self.eigenvalues
        return (q * lam) @ q.T


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return a PCG64 generator for the pair ``(seed, stream)``.

    The map is frozen: ``SeedSequence(seed, spawn_key=(stream,))`` feeds PCG64.
    Distinct stream ids give statistically independent streams.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(ss))


def symmetrize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return 0.5 * (m + m.T)


def _check_square(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return m


def _off_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def _round_robin(p: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of 0..p-1 (p even) in which every pair meets once per sweep."""
    players = list(range(p))
    rounds = []
    for _ in range(p - 1):
        half = p // 2
        i, j = np.array(players[:half]), np.array(players[half:][::-1])
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        rounds.append((lo, hi))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_eig(a: np.ndarray, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi in parallel (round-robin) order.

    Rotations within one round act on disjoint index pairs, so they commute
    and are applied together as one orthogonal product.
    """
    n = a.shape[0]
    p = n + (n % 2)  # odd sizes get a decoupled zero row that is dropped at the end
    work = np.zeros((p, p))
    work[:n, :n] = a
    a = work
    v = np.eye(p)
    scale = max(np.abs(a).max(initial=0.0), np.finfo(float).tiny)
    rounds = _round_robin(p) if p > 1 else []
    for _ in range(max_sweeps):
        off = _off_norm(a)
        if off <= 1e-15 * scale * p:
            break
        for i, j in rounds:
            aij = a[i, j]
            active = np.abs(aij) > 1e-300
            if not active.any():
                continue
            i, j, aij = i[active], j[active], aij[active]
            theta = (a[j, j] - a[i, i]) / (2.0 * aij)
            t = np.copysign(1.0, theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            c = 1.0 / np.hypot(t, 1.0)
            s = t * c
            g = np.eye(p)
            g[i, i] = c
            g[j, j] = c
            g[i, j] = s
            g[j, i] = -s
            a = g.T @ a @ g
            a[i, j] = a[j, i] = 0.0
            v = v @ g
    else:
        off = _off_norm(a)
        raise LinalgError(f"Jacobi did not converge after {max_sweeps} sweeps, off-diagonal norm {off:.3e}")
    return np.diag(a)[:n].copy(), v[:n, :n].copy()


def sym_eig(m: np.ndarray) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending."""
    m = symmetrize(_check_square(m))
    if m.shape[0] <= JACOBI_MAX_DIM:
        lam, q = _jacobi_eig(m)
    else:
        lam, q = np.linalg.eigh(m)
    order = np.argsort(lam)[::-1]
    lam, q = lam[order], q[:, order]
    resid = np.abs(m @ q - q * lam).max(initial=0.0)
    if resid > 1e-8 * (1.0 + np.abs(lam).max(initial=0.0)):
        raise LinalgError(f"eigen residual {resid:.3e} exceeds tolerance")
    return EigenDecomposition(lam, q)


@dataclass(frozen=True)
class CholeskyFactor:
    lower: np.ndarray
    jitter: float

    def solve(self, b: np.ndarray) -> np.ndarray:
        y, info = lapack.dpotrs(self.lower, np.asarray(b, dtype=np.float64), lower=1)
        if info != 0:
            raise LinalgError(f"dpotrs failed with info={info}")
        return y


def cholesky(m: np.ndarray) -> CholeskyFactor:
    """Cholesky factor of an SPD matrix with a bounded diagonal jitter ladder.

    On pivot failure the factorization is retried on ``M + eps*I`` with
    ``eps = 1e-12 * trace(M)/p`` escalating by 10x up to ``1e-6 * trace(M)/p``.
    """
    m = symmetrize(_check_square(m))
    p = m.shape[0]
    if p == 0:
        return CholeskyFactor(np.zeros((0, 0)), 0.0)
    base = abs(np.trace(m)) / p
    if base == 0.0:
        base = 1.0
    jitter = 0.0
    level = JITTER_START
    while True:
        c, info = lapack.dpotrf(m + jitter * np.eye(p) if jitter else m, lower=1, clean=1)
        if info == 0 and np.all(np.isfinite(c)):
            return CholeskyFactor(c, jitter)
        if level > JITTER_MAX * (1 + 1e-9):
            raise LinalgError(
                f"matrix is not positive definite: Cholesky pivot {info} failed "
                f"even with jitter {jitter:.3e}"
            )
        jitter = level * base
        level *= 10.0


def spd_solve(m: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``M x = b`` for symmetric positive definite ``M``."""
    return cholesky(m).solve(b)


def dense_inverse(m: np.ndarray) -> np.ndarray:
    m = symmetrize(_check_square(m))
    p = m.shape[0]
    try:
        inv = np.linalg.inv(m)
    except np.linalg.LinAlgError as exc:
        raise LinalgError(f"matrix is singular: {exc}") from exc
    inv = symmetrize(inv)
    err = np.abs(m @ inv - np.eye(p)).max(initial=0.0)
    if not np.isfinite(err) or err > 1e-8:
        raise LinalgError(f"matrix is numerically singular (|M M^-1 - I|_max = {err:.3e})")
    return inv


def condition_number(m: np.ndarray) -> float:
    """lambda_max / lambda_min; ``inf`` (with a warning) when lambda_min <= 0."""
    lam = sym_eig(m).eigenvalues
    if lam[-1] <= 0.0:
        warnings.warn(
            f"matrix is not positive definite (lambda_min={lam[-1]:.3e})",
            NotPositiveDefiniteWarning,
            stacklevel=2,
        )
        return math.inf
    return float(lam[0] / lam[-1])


def operator_norm(m: np.ndarray) -> float:
    """Spectral norm of a (possibly rectangular) matrix via sym_eig of M^T M."""
    m = np.asarray(m, dtype=np.float64)
    gram = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    return float(math.sqrt(max(sym_eig(gram).eigenvalues[0], 0.0)))
