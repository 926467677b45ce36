"""RBF kernel, Nadaraya-Watson structured kernel regression and GP kernel algebra.

Indices are raw sample positions 0..L-1, so ``gamma`` is in squared-index units.
Kernel values whose exponent exceeds ``UNDERFLOW_EXPONENT`` are set to exactly
zero: they would otherwise be subnormal, which is no more accurate and makes
BLAS and convolution kernels dramatically slower.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack, toeplitz

from .autograd import DimensionError, NumericDomainError, Value, make_node

UNDERFLOW_EXPONENT = 700.0
DEFAULT_JITTER = 1e-6
JITTER_RETRIES = 3


class ContractError(ValueError):
    pass


class CholeskyError(np.linalg.LinAlgError):
    def __init__(self, pivot: int, jitter: float = float("nan")):
        super().__init__(f"non-positive pivot at index {pivot} (jitter {jitter:g})")
        self.pivot = pivot
        self.jitter = jitter


def _check_gamma(gamma: float) -> None:
    if not gamma > 0.0:
        raise NumericDomainError(f"gamma must be positive, got {gamma}")


def rbf(tau: float, tau_prime: float, gamma: float) -> float:
    _check_gamma(gamma)
    d = tau - tau_prime
    return math.exp(-(d * d) / gamma)


def rbf_weights(offsets: np.ndarray, gamma: float) -> np.ndarray:
    """exp(-d^2 / gamma) for an array of index offsets ``d``."""
    _check_gamma(gamma)
    a = np.square(offsets, dtype=np.float64) / gamma
    out = np.exp(-np.minimum(a, UNDERFLOW_EXPONENT))
    out[a >= UNDERFLOW_EXPONENT] = 0.0
    return out


def kernel_row(t: int, length: int, gamma: float) -> np.ndarray:
    """Weights k(t, j) for j = 0..length-1."""
    return rbf_weights(np.arange(length) - t, gamma)


def _offsets(length: int) -> np.ndarray:
    return np.arange(-(length - 1), length, dtype=np.float64)


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # x has length L, w covers offsets -(L-1)..(L-1); 'valid' leaves exactly L outputs.
    # np.convolve is a direct sum, so this is Theta(L^2) time and Theta(L) memory.
    return np.convolve(x, w, mode="valid")


def _nw_row(z: np.ndarray, gamma: float, leave_one_out: bool):
    length = z.shape[0]
    w = rbf_weights(_offsets(length), gamma)
    if leave_one_out:
        # zero the self weight rather than subtracting it afterwards (cancellation at small gamma)
        w[length - 1] = 0.0
    num = _conv(z, w)
    den = _conv(np.ones(length), w)
    return num / den, w, den


def nw_smooth(z, gamma: float, leave_one_out: bool = True) -> np.ndarray:
    """Kernel-weighted average of ``z`` around every index (optionally excluding itself)."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    _check_gamma(gamma)
    if leave_one_out and z.shape[0] < 2:
        raise ContractError("leave-one-out smoothing needs at least two samples")
    if z.shape[0] < 1:
        raise ContractError("empty input")
    mu, _, den = _nw_row(z, gamma, leave_one_out)
    if np.any(den <= 0.0):
        raise NumericDomainError("kernel weights vanished; gamma is too small for leave-one-out")
    return mu


def nw_smooth_all(z, gamma, leave_one_out: bool = True):
    """Row-wise ``nw_smooth``. With autograd Values this records a node on the tape."""
    if isinstance(z, Value) or isinstance(gamma, Value):
        return nw_smooth_value(z, gamma, leave_one_out)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    if gamma.shape[0] != z.shape[0]:
        raise DimensionError(f"{z.shape[0]} rows but {gamma.shape[0]} gamma values")
    return np.vstack([nw_smooth(row, g, leave_one_out) for row, g in zip(z, gamma)])


def nw_smooth_value(z: Value, gamma: Value, leave_one_out: bool = True) -> Value:
    """Taped smoother: ``z`` is N x L, ``gamma`` is N x 1 (positive)."""
    z = z if isinstance(z, Value) else Value(z)
    gamma = gamma if isinstance(gamma, Value) else Value(gamma)
    n, length = z.shape
    if gamma.data.size != n:
        raise DimensionError(f"{n} rows but {gamma.data.size} gamma values")
    if leave_one_out and length < 2:
        raise ContractError("leave-one-out smoothing needs at least two samples")
    g_vec = gamma.data.reshape(-1)
    out = np.empty_like(z.data)
    cache = []
    for i in range(n):
        mu, w, den = _nw_row(z.data[i], float(g_vec[i]), leave_one_out)
        if np.any(den <= 0.0):
            raise NumericDomainError(f"row {i}: kernel weights vanished")
        out[i] = mu
        cache.append((w, den))

    def backward(g):
        offsets = _offsets(length)
        gz = np.zeros_like(z.data)
        gg = np.zeros((n, 1))
        for i in range(n):
            w, den = cache[i]
            gi = g[i] / den
            if z.requires_grad:
                # kernel is symmetric, so the adjoint of the convolution is the same convolution
                gz[i] = _conv(gi, w)
            if gamma.requires_grad:
                gam = float(g_vec[i])
                dw = w * offsets * offsets / (gam * gam)
                dnum = _conv(z.data[i], dw)
                dden = _conv(np.ones(length), dw)
                gg[i, 0] = np.dot(gi, dnum - out[i] * dden)
        if z.requires_grad:
            z._accumulate(gz)
        if gamma.requires_grad:
            gamma._accumulate(gg.reshape(gamma.shape))

    return make_node(out, (z, gamma), backward, "nw_smooth")


@dataclass
class GpKernelMatrix:
    k: np.ndarray
    jitter: float

    @property
    def length(self) -> int:
        return self.k.shape[0]


def rbf_gram(length: int, gamma: float) -> np.ndarray:
    return toeplitz(rbf_weights(np.arange(length, dtype=np.float64), gamma))


def rbf_gram_dgamma(length: int, gamma: float) -> np.ndarray:
    d = np.arange(length, dtype=np.float64)
    return toeplitz(rbf_weights(d, gamma) * d * d / (gamma * gamma))


def gp_kernel_matrix(length: int, gamma: float, jitter: float = DEFAULT_JITTER) -> GpKernelMatrix:
    _check_gamma(gamma)
    if jitter < 0.0:
        raise ValueError("jitter must be non-negative")
    k = rbf_gram(length, gamma)
    k[np.diag_indices(length)] += jitter
    return GpKernelMatrix(k, jitter)


def cholesky(k) -> np.ndarray:
    """Lower-triangular factor of a symmetric positive-definite matrix (LAPACK potrf)."""
    mat = k.k if isinstance(k, GpKernelMatrix) else np.asarray(k, dtype=np.float64)
    c, info = lapack.dpotrf(mat, lower=1, clean=1)
    if info > 0:
        raise CholeskyError(info - 1, getattr(k, "jitter", float("nan")))
    if info < 0:
        raise ValueError(f"potrf: illegal argument {-info}")
    return c


def cholesky_jittered(base: np.ndarray, jitter: float = DEFAULT_JITTER,
                      retries: int = JITTER_RETRIES):
    """Factor ``base + jitter*I``, multiplying jitter by 10 on failure up to ``retries`` times."""
    n = base.shape[0]
    for attempt in range(retries + 1):
        k = base.copy()
        k[np.diag_indices(n)] += jitter
        try:
            return cholesky(k), jitter
        except CholeskyError as err:
            if attempt == retries:
                raise CholeskyError(err.pivot, jitter) from None
            jitter *= 10.0


def cho_solve(c: np.ndarray, b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise ValueError(f"potrs failed with info={info}")
    return x


def cho_logdet(c: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def cho_inverse(c: np.ndarray) -> np.ndarray:
    inv, info = lapack.dpotri(c, lower=1)
    if info != 0:
        raise ValueError(f"potri failed with info={info}")
    lower = np.tril(inv)
    return lower + np.tril(inv, -1).T
