import numpy as np
import pytest

from fpq import formats
from fpq.lorc import LorcFactors, apply_lorc, error_matrix, lorc, lorc_factorize
from fpq.quant import dequantize, quantize
from fpq.spec import parse_spec


def test_error_matrix_on_grid_is_zero():
    spec = parse_spec("fp4:e2m1:group8")
    W = dequantize(quantize(np.random.default_rng(0).standard_normal((4, 16)), spec))
    assert np.all(error_matrix(W, quantize(W, spec)) == 0)


def test_error_matrix_int8_bound():
    W = np.random.default_rng(1).standard_normal((16, 32))
    q = quantize(W, parse_spec("int8:sym:group8"))
    assert np.all(np.abs(error_matrix(W, q)) <= q.expanded_scales() / 2 * (1 + 1e-9))


def test_error_matrix_matches_scalar_loop():
    W = np.random.default_rng(2).standard_normal((64, 64))
    q = quantize(W, parse_spec("fp4:e2m1:group32"))
    table = formats.decode_table(formats.E2M1)
    total = 0.0
    for i in range(64):
        for j in range(64):
            total += (W[i, j] - q.scales[i, j // 32] * table[q.codes[i, j]]) ** 2
    assert np.linalg.norm(error_matrix(W, q)) == pytest.approx(np.sqrt(total), rel=1e-12)


def test_rank_one_exact():
    rng = np.random.default_rng(3)
    E = np.outer(rng.standard_normal(20), rng.standard_normal(30))
    f = lorc_factorize(E, 1)
    assert np.linalg.norm(E - f.product()) <= 1e-10 * np.linalg.norm(E)
    assert f.captured_energy == pytest.approx(1.0)


def test_full_rank_recovery():
    E = np.random.default_rng(4).standard_normal((12, 9))
    f = lorc_factorize(E, 9)
    np.testing.assert_allclose(f.product(), E, atol=1e-12)


def test_residual_matches_eigen_oracle():
    E = np.random.default_rng(5).standard_normal((32, 48))
    f = lorc_factorize(E, 8)
    eig = np.sort(np.clip(np.linalg.eigvalsh(E.T @ E), 0, None))[::-1]
    expected = np.sqrt(eig[8:].sum())
    assert np.linalg.norm(E - f.product()) == pytest.approx(expected, abs=1e-8)


def test_factor_shapes_and_overhead():
    f = lorc_factorize(np.random.default_rng(6).standard_normal((64, 32)), 8)
    assert f.left.shape == (64, 8) and f.right.shape == (8, 32)
    assert f.n_params == 8 * 96
    assert f.overhead() == pytest.approx(768 / 2048)


def test_balanced_split():
    f = lorc_factorize(np.random.default_rng(7).standard_normal((20, 20)), 4)
    np.testing.assert_allclose(np.linalg.norm(f.left, axis=0), np.linalg.norm(f.right, axis=1), rtol=1e-10)


def test_rank_zero_is_identity():
    W = np.random.default_rng(8).standard_normal((16, 16))
    q = quantize(W, parse_spec("fp4:e2m1:group16"))
    f = lorc_factorize(error_matrix(W, q), 0)
    np.testing.assert_array_equal(apply_lorc(q, f), dequantize(q))


def test_full_rank_restores_weight():
    W = np.random.default_rng(9).standard_normal((16, 24))
    q = quantize(W, parse_spec("fp4:e2m1:group8"))
    _, Wt = lorc(W, q, 16)
    np.testing.assert_allclose(Wt, W, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_rank8_strictly_improves(seed):
    W = np.random.default_rng(seed).standard_normal((64, 64))
    q = quantize(W, parse_spec("fp4:e2m1:group32"))
    _, Wt = lorc(W, q, 8)
    assert np.linalg.norm(W - Wt) < np.linalg.norm(W - dequantize(q))


def test_monotone_in_rank():
    W = np.random.default_rng(10).standard_normal((48, 40))
    q = quantize(W, parse_spec("int4:sym:group8"))
    errs = [np.linalg.norm(W - lorc(W, q, r)[1]) for r in (0, 1, 2, 4, 8, 16, 40)]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(errs, errs[1:]))


def test_randomized_close_to_exact():
    rng = np.random.default_rng(11)
    E = rng.standard_normal((2048, 2048)) * 0.01 + np.outer(rng.standard_normal(2048), rng.standard_normal(2048))
    exact = lorc_factorize(E, 4)
    fast = lorc_factorize(E, 4, randomized=True)
    assert np.linalg.norm(E - fast.product()) <= 1.01 * np.linalg.norm(E - exact.product())


@pytest.mark.parametrize("rank", [-1, 11])
def test_rank_validation(rank):
    with pytest.raises(ValueError):
        lorc_factorize(np.ones((10, 12)), rank)


def test_shape_mismatch():
    W = np.ones((4, 4))
    q = quantize(np.ones((4, 5)), parse_spec("int8:sym:tensor"))
    with pytest.raises(ValueError):
        error_matrix(W, q)
    f = LorcFactors(np.ones((3, 1)), np.ones((1, 5)), 1, 1.0)
    with pytest.raises(ValueError):
        apply_lorc(q, f)
