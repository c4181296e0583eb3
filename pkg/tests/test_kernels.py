import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from catr.autodiff import Tape
from catr.kernels import (
    KernelConfig,
    center,
    gram_linear,
    gram_rbf,
    hsic_empirical,
    hsic_residual,
    median_heuristic,
)


def hsic_double_sum(K, L):
    """Biased HSIC written out as the three-term double/triple sum."""
    n = K.shape[0]
    t1 = sum(K[i, j] * L[i, j] for i in range(n) for j in range(n)) / n**2
    t2 = (K.sum() / n**2) * (L.sum() / n**2)
    t3 = sum(K[i, j] * L[i, q] for i in range(n) for j in range(n) for q in range(n)) / n**3
    return (t1 + t2 - 2 * t3) * n**2 / (n - 1) ** 2


def test_gram_linear_small_cases():
    np.testing.assert_array_equal(gram_linear(np.zeros(3)), np.zeros((3, 3)))
    np.testing.assert_array_equal(gram_linear(np.array([1.0, 2.0])), [[1, 2], [2, 4]])


def test_gram_linear_matches_loop(rng):
    u = rng.standard_normal(32)
    K = gram_linear(u)
    oracle = np.array([[u[i] * u[j] for j in range(32)] for i in range(32)])
    np.testing.assert_allclose(K, oracle, atol=1e-12)


def test_gram_rbf_values():
    sigma = 1.7
    L = gram_rbf(np.array([0.0, sigma * np.sqrt(2)]), sigma)
    np.testing.assert_allclose(np.diag(L), 1.0)
    assert L[0, 1] == pytest.approx(np.exp(-1.0), abs=1e-12)
    big = gram_rbf(np.linspace(-3, 3, 7), 1e9)
    np.testing.assert_allclose(big, 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        gram_rbf(np.zeros(3), 0.0)


def test_median_heuristic():
    assert median_heuristic(np.array([0.0, 1.0, 3.0])) == pytest.approx(2.0)
    assert median_heuristic(np.array([0.0, 2.0])) == pytest.approx(2.0)
    assert median_heuristic(np.full(5, 0.3)) == 1e-3


def test_hsic_hand_case_is_one():
    u = np.array([1.0, 2.0, 3.0])
    assert hsic_empirical(gram_linear(u), gram_linear(u)) == 1.0
    assert hsic_double_sum(gram_linear(u), gram_linear(u)) == pytest.approx(1.0, abs=1e-12)


def test_hsic_constant_kernel_is_zero(rng):
    K = gram_linear(rng.standard_normal(10))
    assert abs(hsic_empirical(K, np.full((10, 10), 3.0))) < 1e-12


def test_hsic_independent_samples_near_null():
    rng = np.random.default_rng(5)
    n = 2000
    u, v = rng.standard_normal(n), rng.standard_normal(n)
    cfg = KernelConfig()
    stat = hsic_residual(u, v, cfg)
    null = [hsic_residual(u, v[rng.permutation(n)], cfg) for _ in range(200)]
    assert stat < 5 * np.quantile(null, 0.95)


def test_hsic_residual_zero_outcome_residuals():
    assert abs(hsic_residual(np.linspace(-1, 1, 6), np.zeros(6))) < 1e-12


def test_hsic_residual_standardized_ramp_matches_oracle():
    r = np.arange(1.0, 9.0)
    r = (r - r.mean()) / r.std()
    sigma = median_heuristic(r)
    K = np.outer(r, r)
    L = np.exp(-((r[:, None] - r[None, :]) ** 2) / (2 * sigma**2))
    assert hsic_residual(r, r) == pytest.approx(hsic_double_sum(K, L), abs=1e-10)


def test_hsic_residual_gradient_wrt_ry(rng):
    n = 24
    rT = rng.uniform(-1, 1, n)
    rY = rng.standard_normal(n) + 0.5 * rT
    cfg = KernelConfig(bandwidth_mode="fixed", sigma=median_heuristic(rY))
    tape = Tape()
    leaf = tape.leaf(rY.copy())
    tape.backward(hsic_residual(rT, leaf, cfg))
    g = tape.grad(leaf)
    h = 1e-4
    fd = np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        fd[i] = (hsic_residual(rT, rY + e, cfg) - hsic_residual(rT, rY - e, cfg)) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-4


def test_config_validation():
    with pytest.raises(ValueError):
        KernelConfig(bandwidth_mode="fixed")
    with pytest.raises(ValueError):
        KernelConfig(outcome_kernel="laplace")


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.integers(3, 12), elements=st.floats(-3, 3)),
    st.randoms(use_true_random=False),
)
def test_hsic_permutation_invariant_and_nonnegative(u, rnd):
    v = np.tanh(u) + 0.1 * np.arange(u.size)
    perm = np.array(rnd.sample(range(u.size), u.size))
    a = hsic_residual(u, v)
    b = hsic_residual(u[perm], v[perm])
    assert a == pytest.approx(b, abs=1e-10)
    assert a >= -1e-12


def test_centering_kills_row_and_column_means(rng):
    K = gram_linear(rng.standard_normal((6, 2)))
    C = center(K)
    np.testing.assert_allclose(C.sum(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(C.sum(axis=1), 0.0, atol=1e-12)
