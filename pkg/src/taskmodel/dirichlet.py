"""Dirichlet expectations and information measures (entropy, KL divergence).

Concentration vectors are plain float arrays; `as_concentration` validates
them.
"""

import numpy as np

from taskmodel.errors import UsageError
from taskmodel.special import digamma, log_gamma

__all__ = [
    "as_concentration",
    "expected_log_pi",
    "log_beta",
    "dirichlet_entropy",
    "dirichlet_kl",
    "mean_kl_to_set",
    "pairwise_kl",
]


def as_concentration(gamma, name="concentration", min_size=2):
    """Validate and return a Dirichlet concentration vector (all components > 0).

    ``min_size=1`` admits the degenerate single-theme case used by the E-step.
    """
    arr = np.asarray(gamma, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < min_size:
        raise UsageError(f"{name} must be a vector with at least {min_size} components")
    if not np.all(np.isfinite(arr) & (arr > 0.0)):
        raise UsageError(f"{name} components must be positive and finite")
    return arr


def expected_log_pi(gamma):
    """E[ln pi_k] under Dirichlet(gamma): psi(gamma_k) - psi(sum gamma)."""
    gamma = as_concentration(gamma, min_size=1)
    return digamma(gamma) - digamma(gamma.sum())


def log_beta(gamma):
    """Log of the multivariate beta function, the Dirichlet normaliser."""
    gamma = as_concentration(gamma, min_size=1)
    return float(np.sum(log_gamma(gamma)) - log_gamma(gamma.sum()))


def dirichlet_entropy(gamma):
    """Differential entropy of Dirichlet(gamma)."""
    gamma = as_concentration(gamma)
    total = gamma.sum()
    k = gamma.shape[0]
    return float(
        log_beta(gamma)
        + (total - k) * digamma(total)
        - np.sum((gamma - 1.0) * digamma(gamma))
    )


def dirichlet_kl(p, q):
    """KL[Dir(p) || Dir(q)].

    Asymmetric. Round-off can make the value slightly negative (about -1e-15)
    for identical arguments; it is not clipped.
    """
    p = as_concentration(p, "p")
    q = as_concentration(q, "q")
    if p.shape != q.shape:
        raise UsageError(f"dimension mismatch: {p.shape[0]} vs {q.shape[0]}")
    p_total = p.sum()
    return float(
        log_gamma(p_total)
        - np.sum(log_gamma(p))
        - log_gamma(q.sum())
        + np.sum(log_gamma(q))
        + np.sum((p - q) * (digamma(p) - digamma(p_total)))
    )


def mean_kl_to_set(new, training):
    """Average of KL[Dir(new) || Dir(t)] over the training concentrations."""
    training = list(training)
    if not training:
        raise UsageError("training set is empty")
    return float(np.mean([dirichlet_kl(new, t) for t in training]))


def pairwise_kl(p_rows, q_rows):
    """Matrix of KL[Dir(p_i) || Dir(q_j)] for the rows of two concentration arrays."""
    p = np.atleast_2d(np.asarray(p_rows, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q_rows, dtype=np.float64))
    if p.shape[1] != q.shape[1]:
        raise UsageError(f"dimension mismatch: {p.shape[1]} vs {q.shape[1]}")
    for row in p:
        as_concentration(row, "p")
    for row in q:
        as_concentration(row, "q")
    p_total = p.sum(axis=1)
    log_norm_p = log_gamma(p_total) - log_gamma(p).sum(axis=1)
    log_norm_q = log_gamma(q.sum(axis=1)) - log_gamma(q).sum(axis=1)
    e_log = digamma(p) - digamma(p_total)[:, None]
    own = np.sum(p * e_log, axis=1)
    return (log_norm_p + own)[:, None] - log_norm_q[None, :] - e_log @ q.T
