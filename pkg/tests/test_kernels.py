import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skrvae import autograd as ad
from skrvae.autograd import NumericDomainError, Value, backward
from skrvae.evaluation import fit_exponent
from skrvae.kernels import (CholeskyError, ContractError, cho_inverse, cho_logdet, cho_solve,
                            cholesky, cholesky_jittered, gp_kernel_matrix, kernel_row, nw_smooth,
                            nw_smooth_all, nw_smooth_value, rbf)


def naive_nw(z, gamma, leave_one_out):
    """Double loop straight from the definition."""
    length = len(z)
    out = np.empty(length)
    for t in range(length):
        num = den = 0.0
        for j in range(length):
            if leave_one_out and j == t:
                continue
            k = math.exp(-((t - j) ** 2) / gamma)
            num += k * z[j]
            den += k
        out[t] = num / den
    return out


def test_rbf_values():
    assert rbf(3, 3, 0.7) == 1.0
    assert rbf(0, 1, 1) == pytest.approx(0.36787944, abs=1e-8)
    assert rbf(0, 2, 4) == pytest.approx(math.exp(-1), rel=1e-15)
    with pytest.raises(NumericDomainError):
        rbf(0, 1, 0.0)
    with pytest.raises(NumericDomainError):
        rbf(0, 1, -2.0)


@given(st.integers(-500, 500), st.integers(-500, 500), st.floats(1e-3, 1e6))
def test_rbf_symmetric_and_bounded(a, b, gamma):
    assert rbf(a, b, gamma) == rbf(b, a, gamma)
    assert 0.0 <= rbf(a, b, gamma) <= 1.0


def test_kernel_row_entries():
    row = kernel_row(5, 12, 9.0)
    assert row[5] == 1.0
    assert np.all((row > 0) & (row <= 1))
    assert np.allclose(row, [rbf(5, j, 9.0) for j in range(12)], rtol=1e-15)


def test_two_point_hand_value():
    mu = nw_smooth([0.0, 1.0], 1.0, leave_one_out=False)
    assert abs(mu[0] - 0.26894) <= 1e-5
    assert mu[0] == pytest.approx(math.exp(-1) / (1 + math.exp(-1)), rel=1e-14)


@pytest.mark.parametrize("loo", [True, False])
def test_constant_preserved(loo):
    out = nw_smooth(np.full(50, -2.5), 3.0, leave_one_out=loo)
    assert np.allclose(out, -2.5, rtol=0, atol=1e-14)


def test_huge_gamma_gives_mean():
    z = np.random.default_rng(1).normal(size=40)
    assert np.max(np.abs(nw_smooth(z, 1e12, leave_one_out=False) - z.mean())) <= 1e-6


def test_leave_one_out_contract():
    with pytest.raises(ContractError):
        nw_smooth([1.0], 1.0, leave_one_out=True)
    assert nw_smooth([1.0], 1.0, leave_one_out=False).tolist() == [1.0]


def test_matches_double_loop_oracle():
    rng = np.random.default_rng(7)
    z = rng.normal(size=(3, 64))
    gammas = [0.5, 6.0, 300.0]
    for loo in (True, False):
        fast = nw_smooth_all(z, gammas, loo)
        ref = np.vstack([naive_nw(z[i], gammas[i], loo) for i in range(3)])
        assert np.max(np.abs(fast - ref) / np.maximum(1.0, np.abs(ref))) <= 1e-12


def test_rows_independent_and_single_row_reduction():
    z = np.random.default_rng(2).normal(size=(2, 30))
    both = nw_smooth_all(z, [2.0, 20.0])
    assert np.array_equal(both[0], nw_smooth(z[0], 2.0))
    assert np.array_equal(both[1], nw_smooth(z[1], 20.0))
    assert np.array_equal(nw_smooth_all(z[:1], [2.0])[0], nw_smooth(z[0], 2.0))
    with pytest.raises(ad.DimensionError):
        nw_smooth_all(z, [1.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.floats(0.05, 1e4), st.booleans(), st.integers(0, 2**32 - 1))
def test_convex_combination_bound(length, gamma, loo, seed):
    z = np.random.default_rng(seed).uniform(-5, 5, size=length)
    out = nw_smooth(z, gamma, leave_one_out=loo)
    tol = 1e-12 * np.max(np.abs(z))
    assert np.all(out >= z.min() - tol)
    assert np.all(out <= z.max() + tol)


def test_variance_non_increasing_in_gamma():
    for seed in range(5):
        z = np.random.default_rng(seed).normal(size=512)
        variances = [np.var(nw_smooth(z, g, leave_one_out=False)) for g in (1, 4, 16, 64)]
        assert all(a >= b for a, b in zip(variances, variances[1:]))


@pytest.mark.parametrize("loo", [True, False])
def test_taped_smoother_gradients(loo):
    rng = np.random.default_rng(11)
    z0 = rng.normal(size=(2, 20))
    lg0 = np.log([[3.0], [40.0]])
    w = rng.normal(size=(2, 20))

    def f(z, lg):
        return float(np.sum(w * nw_smooth_all(z, np.exp(lg).ravel(), loo)))

    z = Value(z0, requires_grad=True)
    lg = Value(lg0, requires_grad=True)
    backward(ad.reduce_sum(ad.mul(nw_smooth_value(z, ad.exp(lg), loo), w)))
    eps = 1e-6
    gz = np.zeros_like(z0)
    for idx in np.ndindex(*z0.shape):
        up, dn = z0.copy(), z0.copy()
        up[idx] += eps
        dn[idx] -= eps
        gz[idx] = (f(up, lg0) - f(dn, lg0)) / (2 * eps)
    glg = np.zeros_like(lg0)
    for i in range(2):
        up, dn = lg0.copy(), lg0.copy()
        up[i] += eps
        dn[i] -= eps
        glg[i] = (f(z0, up) - f(z0, dn)) / (2 * eps)
    assert np.max(np.abs(z.grad - gz) / np.maximum(1, np.abs(gz))) <= 1e-6
    assert np.max(np.abs(lg.grad - glg) / np.maximum(1, np.abs(glg))) <= 1e-6


def test_kernel_row_gamma_derivative():
    gamma, eps = 7.0, 1e-5
    analytic = kernel_row(3, 10, gamma) * (np.arange(10) - 3.0) ** 2 / gamma ** 2
    numeric = (kernel_row(3, 10, gamma + eps) - kernel_row(3, 10, gamma - eps)) / (2 * eps)
    assert np.max(np.abs(analytic - numeric)) <= 1e-6


def test_gp_kernel_matrix_examples():
    assert gp_kernel_matrix(1, 2.0, 0.3).k.tolist() == [[1.3]]
    k = gp_kernel_matrix(3, 1.0, 0.0).k
    e1, e4 = math.exp(-1), math.exp(-4)
    assert np.allclose(k, [[1, e1, e4], [e1, 1, e1], [e4, e1, 1]], rtol=1e-15, atol=0)
    assert np.array_equal(k, k.T)
    big = gp_kernel_matrix(64, 25.0, 1e-6)
    c = cholesky(big)
    assert np.max(np.abs(c @ c.T - big.k)) <= 1e-8
    assert np.array_equal(np.triu(c, 1), np.zeros_like(c))


def test_cholesky_hand_cases():
    assert np.array_equal(cholesky(np.eye(4)), np.eye(4))
    c = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
    assert np.allclose(c, [[2.0, 0.0], [1.0, math.sqrt(2)]], rtol=1e-15)
    assert cho_logdet(cholesky(np.diag([2.0, 8.0]))) == pytest.approx(math.log(16), rel=1e-15)


def test_cholesky_solve_and_inverse():
    k = gp_kernel_matrix(20, 4.0, 1e-3).k
    c = cholesky(k)
    b = np.random.default_rng(0).normal(size=(20, 2))
    assert np.allclose(k @ cho_solve(c, b), b, atol=1e-9)
    assert np.allclose(cho_inverse(c), np.linalg.inv(k), rtol=1e-8, atol=1e-8)


def test_cholesky_failure_reports_pivot_and_jitter_escalates():
    with pytest.raises(CholeskyError) as info:
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert info.value.pivot == 1
    indefinite = np.ones((3, 3)) - 1e-9 * np.eye(3)  # smallest eigenvalue -1e-9
    c, used = cholesky_jittered(indefinite, 1e-10)
    assert 1e-9 <= used <= 1e-7
    assert np.max(np.abs(c @ c.T - indefinite - used * np.eye(3))) <= 1e-12
    with pytest.raises(CholeskyError):
        cholesky_jittered(-np.eye(3), 1e-6)


def _best_time(fn, repeats=5):
    fn()
    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        runs.append(time.perf_counter() - t0)
    return min(runs)


LENGTHS = [500, 1000, 2000, 4000]


def test_smoother_cost_is_quadratic():
    z = np.random.default_rng(0).normal(size=(3, LENGTHS[-1]))
    secs = [_best_time(lambda: nw_smooth_all(z[:, :n], [4.0, 40.0, 400.0])) for n in LENGTHS]
    assert abs(fit_exponent(LENGTHS, secs) - 2.0) <= 0.5


def test_cholesky_cost_is_cubic():
    mats = {n: gp_kernel_matrix(n, 25.0) for n in LENGTHS}
    secs = [_best_time(lambda: cholesky(mats[n]), repeats=3) for n in LENGTHS]
    assert abs(fit_exponent(LENGTHS, secs) - 3.0) <= 0.5
