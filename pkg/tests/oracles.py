"""Reference formulas written with explicit loops, dense inverses and determinants."""
import math

import numpy as np


def gaussian_kl_dense(mu_q, cov_q, mu_p, cov_p):
    """KL(N(mu_q, cov_q) || N(mu_p, cov_p)) with explicit inverses and determinants."""
    length = len(mu_q)
    inv_p = np.linalg.inv(cov_p)
    diff = mu_p - mu_q
    _, logdet_p = np.linalg.slogdet(cov_p)
    _, logdet_q = np.linalg.slogdet(cov_q)
    return 0.5 * (logdet_p - logdet_q - length + np.trace(inv_p @ cov_q) + diff @ inv_p @ diff)


def loop_smooth(z, gamma, leave_one_out=True):
    out = np.empty(len(z))
    for t in range(len(z)):
        ks = [(math.exp(-((t - j) ** 2) / gamma), z[j]) for j in range(len(z))
              if not (leave_one_out and j == t)]
        out[t] = sum(k * v for k, v in ks) / sum(k for k, _ in ks)
    return out


def loop_gram(length, gamma, jitter):
    k = np.empty((length, length))
    for s in range(length):
        for t in range(length):
            k[s, t] = math.exp(-((s - t) ** 2) / gamma) + (jitter if s == t else 0.0)
    return k


def oracle_skr(mu, xi, gammas, mode="adopt_q", leave_one_out=True):
    total = 0.0
    length = mu.shape[1]
    for i in range(mu.shape[0]):
        prior_var = xi[i] if mode == "adopt_q" else float(mode)
        total += gaussian_kl_dense(mu[i], xi[i] * np.eye(length),
                                   loop_smooth(mu[i], gammas[i], leave_one_out),
                                   prior_var * np.eye(length))
    return total


def oracle_gp(mu, xi, gammas, jitter):
    length = mu.shape[1]
    return sum(gaussian_kl_dense(mu[i], xi[i] * np.eye(length), np.zeros(length),
                                 loop_gram(length, gammas[i], jitter))
               for i in range(mu.shape[0]))


def oracle_std(mu, xi):
    length = mu.shape[1]
    return sum(gaussian_kl_dense(mu[i], xi[i] * np.eye(length), np.zeros(length), np.eye(length))
               for i in range(mu.shape[0]))
