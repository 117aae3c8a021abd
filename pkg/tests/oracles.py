"""Independent reference implementations used to check the fast paths.

Everything here is deliberately written the slow, obvious way (explicit
loops, dense matrices, finite differences) so the production code is
verified against a formulation that shares none of its algebra.
"""

import numpy as np

from patreid.vocab import Gmm, average_log_likelihood


def fisher_fd_oracle(X, gmm, h=1e-6):
    """Fisher vector via central finite differences of the log-likelihood.

    The per-block scalings 1/(T sqrt(pi_k)) and 1/(T sqrt(2 pi_k)) are
    applied to the raw sum-gradient; in terms of the average log-likelihood
    derivative that sum is d(avg)/d(theta) * T, so T cancels and the
    mean/deviation blocks become sigma/sqrt(pi_k) * d(avg)/d(mu) and
    sigma/sqrt(2 pi_k) * d(avg)/d(sigma).
    """
    K, D = gmm.means.shape
    sigmas = np.sqrt(gmm.variances)

    def avg_ll(means, devs):
        return average_log_likelihood(
            Gmm(weights=gmm.weights, means=means, variances=devs**2), X
        )

    out = np.zeros((K, 2, D))
    for k in range(K):
        for d in range(D):
            m = gmm.means.copy()
            m[k, d] += h
            up = avg_ll(m, sigmas)
            m[k, d] -= 2 * h
            down = avg_ll(m, sigmas)
            out[k, 0, d] = sigmas[k, d] / np.sqrt(gmm.weights[k]) * (up - down) / (2 * h)

            s = sigmas.copy()
            s[k, d] += h
            up = avg_ll(gmm.means, s)
            s[k, d] -= 2 * h
            down = avg_ll(gmm.means, s)
            out[k, 1, d] = (
                sigmas[k, d] / np.sqrt(2 * gmm.weights[k]) * (up - down) / (2 * h)
            )
    return out.reshape(-1)


def dense_kpca_oracle(X, out_dim):
    """Reference kernel PCA: explicit centering matrix, dense eigensolve."""
    n = X.shape[0]
    G = X @ X.T
    J = np.eye(n) - np.ones((n, n)) / n
    centered = J @ G @ J
    eigvals, eigvecs = np.linalg.eigh(centered)
    order = np.argsort(eigvals)[::-1][:out_dim]
    lam = eigvals[order]
    V = eigvecs[:, order]
    return lam, V * np.sqrt(np.maximum(lam, 0.0))
