import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blno.ihvp import (
    DenseOperator,
    LinearOperator,
    SamplingMode,
    cg_ihvp,
    exact_ihvp,
    nystrom_error_bound,
    nystrom_ihvp,
    nystrom_pcg,
    sample_columns,
    sample_indices,
    sketch_from_indices,
    symmetry_gap,
)
from blno.linalg import dense_inverse, make_rng


def random_psd(rng, p, rank=None):
    rank = p if rank is None else rank
    a = rng.standard_normal((p, rank))
    return a @ a.T


def random_spd(rng, p, cond=10.0):
    q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    return (q * np.geomspace(cond, 1.0, p)) @ q.T


# ---------------------------------------------------------------- operators

def test_column_equals_apply_of_unit_vector():
    m = random_psd(make_rng(0), 6)
    for op in (DenseOperator(m), LinearOperator(6, lambda v: m @ v)):
        for j in range(6):
            e = np.zeros(6)
            e[j] = 1
            assert np.array_equal(op.column(j), op.apply(e))
        assert np.allclose(op.diagonal(), np.diag(m))
        assert np.allclose(op.materialize(), m)


def test_symmetry_gap_small_for_symmetric_operator():
    op = DenseOperator(random_psd(make_rng(1), 10))
    assert symmetry_gap(op, make_rng(2)) <= 1e-12


def test_materialize_refuses_large_operator():
    with pytest.raises(ValueError):
        LinearOperator(5000, lambda v: v).materialize()


# ---------------------------------------------------------------- sampling

def test_full_sampling_is_permutation_and_reconstructs():
    rng = make_rng(3)
    h = random_psd(rng, 7)
    sk = sample_columns(DenseOperator(h), 7, SamplingMode.UNIFORM, rng)
    assert sorted(sk.indices.tolist()) == list(range(7))
    assert np.allclose(sk.approximation(), h, atol=1e-8)


def test_sketch_consistency_w_is_c_restricted_to_rows():
    h = random_psd(make_rng(4), 9)
    sk = sample_columns(DenseOperator(h), 4, "uniform", make_rng(5))
    assert len(set(sk.indices.tolist())) == 4
    assert np.array_equal(sk.W, sk.C[sk.indices, :])


def test_diagonal_squared_frequency():
    # P(index 0) = 100^2 / (100^2 + 3)
    rng = make_rng(6)
    diag = np.array([100.0, 1.0, 1.0, 1.0])
    n = 100_000
    hits = sum(sample_indices(diag, 1, "diagonal_squared", rng)[0][0] == 0 for _ in range(n))
    p = 10_000 / 10_003
    assert abs(hits / n - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_uniform_frequency_q2_p4():
    rng = make_rng(7)
    n = 100_000
    counts = np.zeros(4)
    for _ in range(n):
        counts[sample_indices(np.zeros(4), 2, "uniform", rng)[0]] += 1
    sigma = np.sqrt(0.25 / n)
    assert np.all(np.abs(counts / n - 0.5) <= 3 * sigma)


def test_zero_diagonal_falls_back_to_uniform():
    with pytest.warns(RuntimeWarning):
        idx, fell_back = sample_indices(np.zeros(5), 2, "diagonal_squared", make_rng(8))
    assert fell_back and len(set(idx.tolist())) == 2


# ---------------------------------------------------------------- nystrom

def test_nystrom_identity_full_rank():
    b = np.array([1.0, 2.0, -3.0, 4.0])
    sk = sketch_from_indices(DenseOperator(np.eye(4)), range(4))
    assert np.allclose(nystrom_ihvp(sk, 1.0, b).solution, b / 2)


def test_nystrom_empty_sketch():
    b = np.array([1.0, -2.0, 0.5])
    sk = sketch_from_indices(DenseOperator(np.eye(3)), [])
    assert np.allclose(nystrom_ihvp(sk, 4.0, b).solution, b / 4)


def test_nystrom_rank3_exact_recovery():
    rng = make_rng(9)
    h = random_psd(rng, 16, rank=3)
    b = rng.standard_normal(16)
    sk = sketch_from_indices(DenseOperator(h), [0, 1, 2])
    v = nystrom_ihvp(sk, 0.1, b).solution
    assert np.linalg.norm(v - dense_inverse(h + 0.1 * np.eye(16)) @ b) <= 1e-8 * np.linalg.norm(b)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.sampled_from([0.01, 1.0, 50.0]), st.integers(0, 10_000))
def test_woodbury_identity_full_columns(p, rho, seed):
    rng = np.random.default_rng(seed)
    h = random_psd(rng, p, rank=int(rng.integers(1, p + 1)))
    b = rng.standard_normal(p)
    sk = sketch_from_indices(DenseOperator(h), range(p))
    err = np.linalg.norm(nystrom_ihvp(sk, rho, b).solution - exact_ihvp(DenseOperator(h), rho, b))
    assert err <= 1e-8 * np.linalg.norm(b)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 20), st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_operator_bound_holds_even_for_indefinite_columns(p, rho, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((p, p))
    h = 0.5 * (m + m.T)
    b = rng.standard_normal(p)
    sk = sample_columns(DenseOperator(h), int(rng.integers(0, p + 1)), "uniform", rng)
    assert np.linalg.norm(nystrom_ihvp(sk, rho, b).solution) <= np.linalg.norm(b) / rho * (1 + 1e-10)


def test_nested_sketches_improve_frobenius_error():
    rng = make_rng(10)
    for _ in range(10):
        h = random_psd(rng, 32, rank=12)
        perm = rng.permutation(32)
        small = sketch_from_indices(DenseOperator(h), perm[:4]).approximation()
        big = sketch_from_indices(DenseOperator(h), perm[:9]).approximation()
        assert np.linalg.norm(h - big) <= np.linalg.norm(h - small) + 1e-8


def test_nystrom_reports_rho_and_q_on_core_failure():
    h = np.full((3, 3), np.nan)
    sk = sketch_from_indices(DenseOperator(np.eye(3)), [0, 1])
    sk.C[:] = h[:, :2]
    sk.W[:] = np.eye(2)
    with pytest.raises(Exception, match="rho=0.5, q=2"):
        nystrom_ihvp(sk, 0.5, np.ones(3))


# ---------------------------------------------------------------- CG

def test_cg_identity_one_iteration():
    b = np.array([3.0, -1.0, 2.0])
    rep = cg_ihvp(DenseOperator(np.eye(3)), b, 0.0, 10, 1e-12)
    assert rep.iterations == 1 and np.allclose(rep.solution, b)


@pytest.mark.parametrize("seed", range(5))
def test_cg_finite_termination(seed):
    rng = make_rng(seed, 11)
    n = 8
    h = random_spd(rng, n, cond=100)
    b = rng.standard_normal(n)
    rep = cg_ihvp(DenseOperator(h), b, 0.0, n + 2, 1e-10)
    assert rep.residual_norm <= 1e-8 * np.linalg.norm(b)
    assert np.allclose(rep.solution, dense_inverse(h) @ b, atol=1e-7)


def test_cg_regularized_matches_exact():
    rng = make_rng(12)
    h = random_spd(rng, 20, cond=1e3)
    b = rng.standard_normal(20)
    rep = cg_ihvp(DenseOperator(h), b, 0.5, 200, 1e-12)
    assert np.allclose(rep.solution, exact_ihvp(DenseOperator(h), 0.5, b), atol=1e-8)


def test_cg_divergence_returns_finite_iterate():
    h = np.diag([1.0, -1.0, 1e-300])
    rep = cg_ihvp(DenseOperator(h), np.array([1.0, 1.0, 1.0]), 0.0, 30, 1e-12)
    assert np.all(np.isfinite(rep.solution))
    assert rep.diverged


def test_cg_rejects_negative_regularizer():
    with pytest.raises(ValueError):
        cg_ihvp(DenseOperator(np.eye(2)), np.ones(2), -1.0)


# ---------------------------------------------------------------- Nystrom-preconditioned CG

def test_pcg_identity():
    sk = sketch_from_indices(DenseOperator(np.eye(4)), range(4))
    rep = nystrom_pcg(DenseOperator(np.eye(4)), np.ones(4), sk, 1.0, 10, 1e-12)
    assert rep.iterations == 1 and np.allclose(rep.solution, 0.5)


def test_pcg_partial_identity_sketch_two_eigenvalue_clusters():
    # preconditioned spectrum is {1, 2}, so exactly two iterations
    sk = sketch_from_indices(DenseOperator(np.eye(4)), [0])
    rep = nystrom_pcg(DenseOperator(np.eye(4)), np.ones(4), sk, 1.0, 10, 1e-12)
    assert rep.iterations == 2


def test_pcg_exact_preconditioner_two_iterations():
    rng = make_rng(13)
    h = random_psd(rng, 12, rank=3)
    sk = sketch_from_indices(DenseOperator(h), [0, 1, 2])
    rep = nystrom_pcg(DenseOperator(h), rng.standard_normal(12), sk, 0.3, 10, 1e-10)
    assert rep.iterations <= 2


def test_pcg_beats_plain_cg_on_wide_spectrum():
    d = np.geomspace(1e6, 1.0, 40)
    op = DenseOperator(np.diag(d))
    b = make_rng(14).standard_normal(40)
    sk = sketch_from_indices(op, range(10))
    rho = 10.0
    pre = nystrom_pcg(op, b, sk, rho, 500, 1e-8)
    plain = cg_ihvp(op, b, rho, 500, 1e-8)
    assert pre.iterations < plain.iterations


def test_solvers_agree_on_well_conditioned_system():
    rng = make_rng(15)
    h = random_spd(rng, 25, cond=1e3)
    b = rng.standard_normal(25)
    exact = exact_ihvp(DenseOperator(h), 0.1, b)
    sk = sample_columns(DenseOperator(h), 5, "uniform", rng)
    assert np.allclose(nystrom_pcg(DenseOperator(h), b, sk, 0.1, 200, 1e-12).solution, exact, atol=1e-8)
    assert np.allclose(cg_ihvp(DenseOperator(h), b, 0.1, 200, 1e-12).solution, exact, atol=1e-8)


# ---------------------------------------------------------------- exact oracle and error bound

def test_exact_examples():
    assert np.allclose(exact_ihvp(DenseOperator(np.zeros((2, 2))), 2.0, np.array([4.0, 6.0])), [2.0, 3.0])
    assert np.allclose(exact_ihvp(DenseOperator(np.diag([1.0, 3.0])), 1.0, np.array([2.0, 8.0])), [1.0, 2.0])


def test_exact_residual_random_spd():
    rng = make_rng(16)
    h = random_spd(rng, 32)
    b = rng.standard_normal(32)
    v = exact_ihvp(DenseOperator(h), 0.0, b)
    assert np.linalg.norm(h @ v - b) <= 1e-9


def test_exact_refuses_large_dimension():
    with pytest.raises(ValueError):
        exact_ihvp(LinearOperator(3000, lambda v: v), 1.0, np.ones(3000))


def test_error_bound_examples():
    assert nystrom_error_bound(1.0, 1.0, 0.0, 0.0, 5, 1.0) == 0.0
    assert nystrom_error_bound(1.0, 1e9, 1.0, 0.0, 5, 1.0) <= 1e-6
    # (M / rho) * lam / (lam + rho) with every constant equal to one
    assert nystrom_error_bound(1.0, 1.0, 1.0, 0.0, 5, 1.0) == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(1e-3, 1e3), st.floats(0, 10), st.floats(0, 1), st.integers(1, 50))
def test_error_bound_monotone_and_below_m_over_rho(M, rho, lam, eps, pt):
    a = nystrom_error_bound(M, rho, lam, eps, pt, 1.0)
    b = nystrom_error_bound(M, rho * 1.5, lam, eps, pt, 1.0)
    assert b <= a + 1e-15
    assert a < M / rho
