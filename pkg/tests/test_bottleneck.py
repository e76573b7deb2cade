import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqem import bottleneck
from vqem.codebook import Codebook, nearest_code


def test_exact_code_has_zero_commitment():
    cb = Codebook(np.array([[1.0, 2.0], [3.0, -1.0]]))
    out = bottleneck.quantize_hard([[3.0, -1.0]], cb)
    assert out.quantized.tolist() == [[3.0, -1.0]]
    assert out.commitment_loss == 0.0


def test_hard_example_commitment():
    out = bottleneck.quantize_hard([[0.2]], Codebook(np.array([[0.0], [1.0]])), beta=0.25)
    assert out.quantized.tolist() == [[0.0]]
    assert out.commitment_loss == pytest.approx(0.01, rel=1e-12)


def test_hard_rows_are_codebook_rows():
    rng = np.random.default_rng(0)
    cb = Codebook(rng.standard_normal((8, 3)))
    out = bottleneck.quantize_hard(rng.standard_normal((30, 3)), cb)
    table = {tuple(r) for r in cb.embeddings.astype(np.float64).tolist()}
    assert all(tuple(r) in table for r in out.quantized.tolist())


def test_requantize_is_idempotent():
    rng = np.random.default_rng(1)
    cb = Codebook(rng.standard_normal((10, 4)))
    out = bottleneck.quantize_hard(rng.standard_normal((50, 4)), cb)
    np.testing.assert_array_equal(nearest_code(out.quantized, cb), out.assignments)


def test_commitment_recomputes_from_fields():
    rng = np.random.default_rng(2)
    cb = Codebook(rng.standard_normal((6, 3)))
    z_e = rng.standard_normal((12, 3))
    for out in (bottleneck.quantize_hard(z_e, cb, 0.7), bottleneck.quantize_soft(z_e, cb, 5, 3, 0.7)):
        expect = 0.7 * np.mean(np.sum((z_e - out.quantized) ** 2, axis=1))
        assert out.commitment_loss == pytest.approx(expect, rel=1e-9)


def test_soft_point_mass_equals_hard():
    cb = Codebook(np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]]))
    z_e = np.array([[1.0, 0.5], [99.0, 1.0], [2.0, 97.0]])
    hard = bottleneck.quantize_hard(z_e, cb)
    for m in (1, 10):
        soft = bottleneck.quantize_soft(z_e, cb, m=m, seed=5)
        np.testing.assert_array_equal(soft.quantized, hard.quantized)
        assert soft.commitment_loss == hard.commitment_loss


def test_soft_rows_inside_codebook_ball():
    rng = np.random.default_rng(3)
    cb = Codebook(rng.standard_normal((7, 4)))
    out = bottleneck.quantize_soft(rng.standard_normal((40, 4)) * 0.3, cb, m=10, seed=1)
    bound = np.linalg.norm(cb.embeddings.astype(np.float64), axis=1).max()
    assert np.all(np.linalg.norm(out.quantized, axis=1) <= bound + 1e-12)


def test_soft_nearest_matches_hard_assignment():
    rng = np.random.default_rng(4)
    cb = Codebook(rng.standard_normal((9, 2)))
    z_e = rng.standard_normal((25, 2))
    out = bottleneck.quantize_soft(z_e, cb, m=3, seed=0)
    np.testing.assert_array_equal(out.nearest, nearest_code(z_e, cb))


def test_backward_zero_beta_is_identity():
    rng = np.random.default_rng(5)
    cb = Codebook(rng.standard_normal((4, 3)))
    z_e = rng.standard_normal((6, 3))
    g = rng.standard_normal((6, 3))
    out = bottleneck.quantize_hard(z_e, cb, beta=0.0)
    got = bottleneck.backward(g, out, z_e)
    assert got.tobytes() == g.tobytes()
    assert got is not g


def test_backward_example():
    out = bottleneck.quantize_hard([[0.2]], Codebook(np.array([[0.0], [1.0]])), beta=0.25)
    np.testing.assert_allclose(bottleneck.backward([[0.0]], out, [[0.2]]), [[0.1]], rtol=1e-12)


def test_backward_shape_mismatch():
    out = bottleneck.quantize_hard([[0.2]], Codebook(np.array([[0.0], [1.0]])))
    with pytest.raises(ValueError):
        bottleneck.backward([[0.0, 0.0]], out, [[0.2]])


def commitment_fd_error(seed, beta, soft):
    rng = np.random.default_rng(seed)
    K, D, N = 5, 3, 4
    cb = Codebook(rng.standard_normal((K, D)) * 3)
    z_e = rng.standard_normal((N, D))
    out = bottleneck.quantize_soft(z_e, cb, 6, seed, beta) if soft else bottleneck.quantize_hard(z_e, cb, beta)
    analytic = bottleneck.backward(np.zeros_like(z_e), out, z_e)
    h = 1e-4
    worst = 0.0
    for i in range(N):
        for j in range(D):
            plus, minus = z_e.copy(), z_e.copy()
            plus[i, j] += h
            minus[i, j] -= h
            # z_q held fixed: assignments are constants under differentiation
            num = (bottleneck.commitment_loss(plus, out.quantized, beta)
                   - bottleneck.commitment_loss(minus, out.quantized, beta)) / (2 * h)
            a = analytic[i, j]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 4.0), st.booleans())
def test_commitment_gradient_finite_differences(seed, beta, soft):
    assert commitment_fd_error(seed, beta, soft) < 1e-4


def test_total_loss_adds_commitment():
    out = bottleneck.quantize_hard([[0.2]], Codebook(np.array([[0.0], [1.0]])), beta=0.25)
    assert bottleneck.total_loss(0.5, out) == pytest.approx(0.51)
