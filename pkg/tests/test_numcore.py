import zlib

import numpy as np
import pytest

from adaptfed.numcore import (ConfigurationError, NonFiniteError, finite_diff_grad, log_softmax, make_rng,
                              matmul, sample_dirichlet, sample_gaussian, sample_uniform, softmax)


def test_matmul_identity_and_known_product():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(a, np.eye(2)), a)
    assert np.array_equal(matmul(a, np.array([[0.0], [1.0]])), np.array([[2.0], [4.0]]))


def test_matmul_rejects_mismatch_and_wrong_rank():
    with pytest.raises(ConfigurationError, match="mismatch"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ConfigurationError, match="2-D"):
        matmul(np.ones(3), np.ones((3, 1)))


@pytest.mark.parametrize("seed", range(5))
def test_finite_diff_exact_on_cubic(seed):
    # f(x) = sum c_k x_k^3 + (a . x)^2, gradient written out by hand
    rng = np.random.default_rng(seed)
    c, a, x = rng.normal(size=(3, 6))
    f = lambda v: float(c @ v**3 + (a @ v) ** 2)
    analytic = 3 * c * x**2 + 2 * (a @ x) * a
    # central differences on a cubic leave an h^2 * f''' / 6 term
    h = 1e-4
    assert np.allclose(finite_diff_grad(f, x, h), analytic, rtol=0, atol=2 * h * h * np.abs(c).max() + 1e-8)


def test_finite_diff_does_not_modify_input():
    x = np.array([1.0, 2.0])
    finite_diff_grad(lambda v: float(v @ v), x)
    assert np.array_equal(x, [1.0, 2.0])


def test_finite_diff_names_bad_coordinate():
    # sqrt is finite at 0 but not at -h, so only coordinate 1 fails
    f = lambda v: float(np.sqrt(v).sum())
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError, match="coordinate 1"):
        finite_diff_grad(f, np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ConfigurationError):
        finite_diff_grad(f, np.ones(2), h=0.0)


def test_make_rng_matches_independent_construction():
    key = zlib.crc32(b"init")
    oracle = np.random.Generator(np.random.PCG64(np.random.SeedSequence(7, spawn_key=(key, 3))))
    assert np.array_equal(make_rng(7, "init", 3).random(4), oracle.random(4))


def test_make_rng_golden_values():
    assert np.allclose(make_rng(7, "init").random(3), [0.96362232, 0.95429388, 0.27685316], atol=1e-8)
    assert np.allclose(make_rng(7, "init", 3).random(2), [0.90032085, 0.28840646], atol=1e-8)


def test_streams_are_isolated_by_purpose():
    a = make_rng(0, "partition").random(5)
    # drawing heavily from another purpose does not shift this stream
    make_rng(0, "init").random(10_000)
    assert np.array_equal(make_rng(0, "partition").random(5), a)
    assert not np.array_equal(make_rng(0, "batching").random(5), a)
    assert not np.array_equal(make_rng(1, "partition").random(5), a)


def test_uniform_moments():
    # U(0.4, 0.6) over 1e5 draws: mean 0.5, standard error ~1.8e-4
    x = sample_uniform(make_rng(3, "u"), 0.4, 0.6, 100_000)
    assert abs(x.mean() - 0.5) < 0.01
    assert x.min() >= 0.4 and x.max() < 0.6
    with pytest.raises(ConfigurationError):
        sample_uniform(make_rng(0), 1.0, 1.0, 3)


def test_gaussian_moments():
    x = sample_gaussian(make_rng(4, "g"), 2.0, 0.5, 100_000)
    assert abs(x.mean() - 2.0) < 0.01
    assert abs(x.std() - 0.5) < 0.01


def test_dirichlet_simplex_and_mean():
    alpha = np.array([0.5, 1.0, 2.0])
    rng = make_rng(5, "dir")
    draws = np.array([sample_dirichlet(rng, alpha) for _ in range(20_000)])
    assert np.allclose(draws.sum(axis=1), 1.0, atol=1e-12)
    # E[w] = alpha / sum(alpha); per-coordinate std of the mean < 0.003
    assert np.allclose(draws.mean(axis=0), alpha / alpha.sum(), atol=0.01)


def test_dirichlet_golden_draw():
    assert np.allclose(sample_dirichlet(make_rng(1, "d"), [0.5, 1.0, 2.0]),
                       [0.56284012, 0.16992251, 0.26723737], atol=1e-8)


def test_dirichlet_tiny_concentration_stays_positive():
    w = sample_dirichlet(make_rng(2, "tiny"), np.full(50, 1e-3))
    assert np.all(w > 0) and abs(w.sum() - 1.0) < 1e-12


def test_dirichlet_rejects_bad_alpha():
    for bad in ([], [1.0, 0.0], [1.0, np.inf]):
        with pytest.raises(ConfigurationError):
            sample_dirichlet(make_rng(0), bad)


def test_softmax_stable_and_consistent():
    x = np.array([[1000.0, 1000.0], [0.0, np.log(3.0)]])
    assert np.allclose(softmax(x), [[0.5, 0.5], [0.25, 0.75]])
    assert np.allclose(np.exp(log_softmax(x)), softmax(x))
