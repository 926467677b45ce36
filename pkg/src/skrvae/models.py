"""Pointwise encoder/decoder networks, latent priors and the four training objectives.

All latent quantities are N x L (component x sample index). Networks act on one
sample index at a time (an N-vector in, an N-vector out) with weights shared
across indices, so any temporal structure the model learns comes from the prior.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import autograd as ad
from .autograd import NumericDomainError, ParameterStore, Value
from .kernels import (DEFAULT_JITTER, cho_inverse, cho_logdet, cholesky_jittered, nw_smooth_value,
                      rbf_gram, rbf_weights)
from .rng import CounterRNG

XI_FLOOR = 1e-6
REPARAM_FLOOR = 1e-10
METHODS = ("skr", "gp", "vanilla", "beta")


class ConfigurationError(ValueError):
    pass


@dataclass
class LatentPosterior:
    mu: Value  # N x L
    xi: Value  # N x 1, one shared variance per component

    @property
    def shape(self):
        return self.mu.shape


@dataclass
class PriorMoments:
    mu_prior: np.ndarray
    xi_prior: np.ndarray


@dataclass
class NetworkConfig:
    input_dim: int
    hidden: Tuple[int, ...] = (64, 64)
    output_dim: Optional[int] = None

    def sizes(self):
        out = self.output_dim if self.output_dim is not None else self.input_dim
        return (self.input_dim, *self.hidden, out)


EncoderConfig = NetworkConfig
DecoderConfig = NetworkConfig


@dataclass
class DiscriminatorConfig:
    input_dim: int
    hidden: Tuple[int, ...] = (64, 64)

    def sizes(self):
        return (self.input_dim, *self.hidden, 1)


@dataclass
class LossHyper:
    lam: Optional[float] = 1.0
    beta: Optional[float] = None
    disc_weight: float = 0.0
    variance_mode: Union[str, float] = "adopt_q"
    jitter: float = DEFAULT_JITTER
    leave_one_out: bool = True


# ---------------------------------------------------------------- networks

def init_mlp(store: ParameterStore, prefix: str, sizes: Sequence[int], rng: CounterRNG,
             zero: bool = False) -> None:
    """Glorot-uniform weights and zero biases; draws are taken layer by layer, row-major."""
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = (2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * limit
        store.add(f"{prefix}.W{k}", np.zeros_like(w) if zero else w)
        store.add(f"{prefix}.b{k}", np.zeros((1, fan_out)))


def mlp(rows: Value, params, prefix: str) -> Value:
    """Apply tanh MLP ``prefix`` to each row of ``rows`` (samples x features)."""
    h = rows
    k = 0
    while f"{prefix}.W{k}" in params:
        h = ad.matmul(h, params[f"{prefix}.W{k}"]) + params[f"{prefix}.b{k}"]
        if f"{prefix}.W{k + 1}" in params:
            h = ad.tanh(h)
        k += 1
    if k == 0:
        raise KeyError(f"no layers registered under {prefix!r}")
    return h


def init_params(method: str, n: int, hidden: Sequence[int] = (64, 64),
                disc_hidden: Optional[Sequence[int]] = (64, 64), gamma_init=None,
                xi_init: float = 1.0, seed: int = 0) -> ParameterStore:
    """Create encoder, decoder, log-variance, log-gamma (skr/gp) and discriminator parameters."""
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    rng = CounterRNG(seed)
    store = ParameterStore()
    init_mlp(store, "enc", (n, *hidden, n), rng)
    init_mlp(store, "dec", (n, *hidden, n), rng)
    store.add("log_xi", np.full((n, 1), np.log(xi_init)))
    if method in ("skr", "gp"):
        gamma = default_gamma_init(n) if gamma_init is None else np.asarray(gamma_init, float)
        if gamma.size != n or np.any(gamma <= 0):
            raise ConfigurationError(f"gamma_init needs {n} positive values")
        store.add("log_gamma", np.log(gamma).reshape(n, 1))
    if disc_hidden is not None:
        init_mlp(store, "disc", (n, *disc_hidden, 1), rng)
    return store


def default_gamma_init(n: int) -> np.ndarray:
    """Spreads one decade apart: 400, 40, 4 for n = 3 (smoothest first)."""
    return 4.0 * 10.0 ** np.arange(n - 1, -1, -1, dtype=float)


def _as_rows(x) -> Value:
    """N x L observations -> L x N constant rows for the pointwise networks."""
    if isinstance(x, Value):
        return ad.transpose(x)
    return Value(np.ascontiguousarray(np.asarray(x, dtype=np.float64).T))


def encode(x, params) -> LatentPosterior:
    mu = ad.transpose(mlp(_as_rows(x), params, "enc"))
    xi = ad.clamp_min(ad.exp(params["log_xi"]), XI_FLOOR)
    return LatentPosterior(mu, xi)


def reparameterize(post: LatentPosterior, noise: np.ndarray) -> Value:
    if noise.shape != post.mu.shape:
        raise ad.DimensionError(f"noise {noise.shape} != posterior {post.mu.shape}")
    scale = ad.exp(0.5 * ad.log(ad.clamp_min(post.xi, REPARAM_FLOOR)))
    return post.mu + scale * Value(noise)


def decode(z, params) -> Value:
    return ad.transpose(mlp(_as_rows(z), params, "dec"))


# ---------------------------------------------------------------- losses

def recon_loss(x, x_hat) -> Value:
    """Unit-variance Gaussian negative log-likelihood without constants: mean of half squared error."""
    diff = ad.sub(x, x_hat)
    if diff.shape != ad.lift(x).shape:
        raise ad.DimensionError("reconstruction shape mismatch")
    return 0.5 * ad.reduce_mean(ad.square(diff))


def _check_variance(post: LatentPosterior) -> None:
    if np.any(post.xi.data <= 0.0):
        raise NumericDomainError("posterior variance must be positive")


def skr_kl(post: LatentPosterior, gamma: Value, variance_mode: Union[str, float] = "adopt_q",
           leave_one_out: bool = True) -> Value:
    """KL from the factorized posterior to the kernel-regression prior, summed over components.

    The prior mean is the Nadaraya-Watson smooth of the posterior mean. With
    ``variance_mode="adopt_q"`` the prior borrows the posterior variance and the KL
    reduces to ``0.5 * ||mu_krf - mu||^2 / xi`` per component; a float ``h`` uses a
    fixed pseudo-variance instead.
    """
    _check_variance(post)
    n, length = post.mu.shape
    mu_krf = nw_smooth_value(post.mu, gamma, leave_one_out)
    sq = ad.reduce_sum(ad.square(mu_krf - post.mu), axis=1)  # N x 1
    if variance_mode == "adopt_q":
        return 0.5 * ad.reduce_sum(sq / post.xi)
    h = float(variance_mode)
    if not h > 0.0:
        raise NumericDomainError("pseudo-variance must be positive")
    per = (length * (np.log(h) - 1.0)) - length * ad.log(post.xi) + (length / h) * post.xi + sq / h
    return 0.5 * ad.reduce_sum(per)


def std_normal_kl(post: LatentPosterior) -> Value:
    _check_variance(post)
    length = post.mu.shape[1]
    per_var = post.xi - ad.log(post.xi) - 1.0
    return 0.5 * (ad.reduce_sum(ad.square(post.mu)) + length * ad.reduce_sum(per_var))


def gp_kl(post: LatentPosterior, gamma: Value, jitter: float = DEFAULT_JITTER) -> Value:
    """Sum over components of KL(N(mu_i, xi_i I) || N(0, K_i)), K_i the RBF Gram matrix.

    Everything goes through a Cholesky factor per component: Theta(N L^3) time and
    Theta(L^2) memory per component, which is the cost the kernel-regression prior avoids.
    """
    _check_variance(post)
    mu, xi = post.mu, post.xi
    gamma = ad.lift(gamma)
    n, length = mu.shape
    total = 0.0
    saved = []
    for i in range(n):
        g_i = float(gamma.data.reshape(-1)[i])
        xi_i = float(xi.data.reshape(-1)[i])
        factor, _ = cholesky_jittered(rbf_gram(length, g_i), jitter)
        k_inv = cho_inverse(factor)
        alpha = k_inv @ mu.data[i]
        tr_inv = float(np.trace(k_inv))
        total += 0.5 * (cho_logdet(factor) - length * np.log(xi_i) - length
                        + xi_i * tr_inv + float(mu.data[i] @ alpha))
        saved.append((k_inv, alpha, tr_inv))

    def backward(g):
        g = float(g.reshape(-1)[0])
        g_mu = np.zeros_like(mu.data)
        g_xi = np.zeros((n, 1))
        g_gamma = np.zeros((n, 1))
        for i, (k_inv, alpha, tr_inv) in enumerate(saved):
            xi_i = float(xi.data.reshape(-1)[i])
            g_mu[i] = g * alpha
            g_xi[i, 0] = g * 0.5 * (tr_inv - length / xi_i)
            if gamma.requires_grad:
                g_gamma[i, 0] = g * _gp_kl_dgamma(k_inv, alpha, xi_i,
                                                  float(gamma.data.reshape(-1)[i]))
        if mu.requires_grad:
            mu._accumulate(g_mu)
        if xi.requires_grad:
            xi._accumulate(g_xi.reshape(xi.shape))
        if gamma.requires_grad:
            gamma._accumulate(g_gamma.reshape(gamma.shape))

    return ad.make_node(np.array([[total]]), (mu, xi, gamma), backward, "gp_kl")


def _diagonal_sums(m: np.ndarray) -> np.ndarray:
    """s[d] = sum_t m[t, t + d] for d = 0..L-1."""
    return np.array([np.trace(m, offset=d) for d in range(m.shape[0])])


def _gp_kl_dgamma(k_inv: np.ndarray, alpha: np.ndarray, xi: float, gamma: float) -> float:
    """d KL / d gamma = 0.5 * tr(G dK) with G = K^-1 - xi K^-2 - alpha alpha^T.

    dK is a symmetric Toeplitz matrix, so only the diagonal sums of G are needed. Those of
    K^-2 are the summed row autocorrelations of K^-1 (via FFT), avoiding an L^3 product.
    """
    length = k_inv.shape[0]
    d = np.arange(length, dtype=np.float64)
    dk = rbf_weights(d, gamma) * d * d / (gamma * gamma)
    spec = np.fft.rfft(k_inv, n=2 * length, axis=1)
    power = (spec.real ** 2 + spec.imag ** 2).sum(axis=0)
    inv_sq = np.fft.irfft(power, n=2 * length)[:length]
    outer = np.correlate(alpha, alpha, mode="full")[length - 1:]
    weight = np.full(length, 2.0)
    weight[0] = 1.0
    return 0.5 * float(np.sum(weight * dk * (_diagonal_sums(k_inv) - xi * inv_sq - outer)))


# ---------------------------------------------------------------- adversarial independence

def shuffle_rows(z: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """Permute each component's sample indices independently (samples from the marginal product)."""
    return np.take_along_axis(z, perms, axis=1)


def _frozen(params, prefix: str) -> Dict[str, Value]:
    return {k: Value(v.data) for k, v in params.items() if k.startswith(prefix)}


def disc_logits(samples: Value, params) -> Value:
    """Logits for each column of the N x L ``samples``; returns L x 1."""
    return mlp(ad.transpose(samples), params, "disc")


def discriminator_loss(z: np.ndarray, params, perms: np.ndarray) -> Value:
    """Cross-entropy of joint columns (label 1) against row-shuffled columns (label 0).

    ``z`` is detached, so only discriminator weights receive gradients.
    """
    z = np.asarray(z.data if isinstance(z, Value) else z)
    joint = disc_logits(Value(z), params)
    shuffled = disc_logits(Value(shuffle_rows(z, perms)), params)
    return 0.5 * (ad.reduce_mean(ad.softplus(-joint)) + ad.reduce_mean(ad.softplus(shuffled)))


def generator_penalty(z: Value, params) -> Value:
    """Cross-entropy of the joint columns against label 0, with the discriminator frozen."""
    return ad.reduce_mean(ad.softplus(disc_logits(z, _frozen(params, "disc."))))


def discriminator_losses(z: Value, params, perms: np.ndarray):
    return discriminator_loss(z, params, perms), generator_penalty(z, params)


# ---------------------------------------------------------------- objectives

@dataclass
class LossOutput:
    total: Value
    breakdown: Dict[str, float]
    z: Value
    posterior: LatentPosterior
    x_hat: Value = field(repr=False, default=None)


def kl_term(method: str, post: LatentPosterior, params, hyper: LossHyper) -> Tuple[float, Value]:
    """Return (weight, KL) for ``method``."""
    if method == "skr":
        if hyper.lam is None:
            raise ConfigurationError("skr needs lambda")
        return hyper.lam, skr_kl(post, ad.exp(params["log_gamma"]), hyper.variance_mode,
                                 hyper.leave_one_out)
    if method == "gp":
        if hyper.lam is None:
            raise ConfigurationError("gp needs lambda")
        return hyper.lam, gp_kl(post, ad.exp(params["log_gamma"]), hyper.jitter)
    if method == "vanilla":
        return 1.0, std_normal_kl(post)
    if method == "beta":
        if hyper.beta is None:
            raise ConfigurationError("beta method needs beta")
        return hyper.beta, std_normal_kl(post)
    raise ConfigurationError(f"unknown method {method!r}")


def loss(method: str, x, params, hyper: LossHyper, noise: np.ndarray) -> LossOutput:
    """Negated ELBO per latent element, plus the weighted adversarial penalty.

    ``recon + weight * KL / (N*L) + disc_weight * gen_penalty``: the reconstruction
    term is a per-element mean, so the summed KL is put on the same per-element scale.
    """
    post = encode(x, params)
    z = reparameterize(post, noise)
    x_hat = decode(z, params)
    recon = recon_loss(x, x_hat)
    weight, kl = kl_term(method, post, params, hyper)
    n, length = post.mu.shape
    total = recon + (weight / (n * length)) * kl
    gen = None
    if hyper.disc_weight:
        gen = generator_penalty(z, params)
        total = total + hyper.disc_weight * gen
    breakdown = {"loss": total.item(), "recon": recon.item(), "kl": kl.item(),
                 "gen": gen.item() if gen is not None else 0.0}
    return LossOutput(total, breakdown, z, post, x_hat)
