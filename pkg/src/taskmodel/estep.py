"""Per-task variational inference over responsibilities and Dirichlet parameters."""

from dataclasses import dataclass

import numpy as np

from taskmodel.dirichlet import as_concentration, expected_log_pi, log_beta
from taskmodel.errors import DegeneracyError, UsageError
from taskmodel.themes import expected_loglik_matrix

__all__ = [
    "TaskPosterior",
    "ElboBreakdown",
    "compute_responsibilities",
    "update_gamma",
    "run_estep",
    "lda_elbo",
    "DEFAULT_THRESHOLD",
    "DEFAULT_MAX_ITERS",
]

DEFAULT_THRESHOLD = 1e-3
DEFAULT_MAX_ITERS = 100
_UNDERFLOW = 1e-300


@dataclass(frozen=True, eq=False)
class TaskPosterior:
    """Variational state of one task: Dirichlet(gamma) and responsibilities r (N x K)."""

    gamma: np.ndarray
    responsibilities: np.ndarray
    iterations: int = 0


@dataclass(frozen=True)
class ElboBreakdown:
    """The five expectations of the LDA lower bound.

    ``entropy_qz`` and ``entropy_qpi`` are stored with the sign flipped
    (-E ln q), so ``total`` is the plain sum of the five fields.
    """

    expected_loglik: float
    expected_log_pz: float
    expected_log_pprior: float
    entropy_qz: float
    entropy_qpi: float

    @property
    def total(self):
        return (
            self.expected_loglik
            + self.expected_log_pz
            + self.expected_log_pprior
            + self.entropy_qz
            + self.entropy_qpi
        )


def compute_responsibilities(expected_logliks, log_pi_tilde):
    """Normalised r_nk proportional to exp(E ln N(u_n; theme k) + E ln pi_k)."""
    ell = np.atleast_2d(np.asarray(expected_logliks, dtype=np.float64))
    log_pi_tilde = np.asarray(log_pi_tilde, dtype=np.float64)
    if ell.shape[1] != log_pi_tilde.shape[0]:
        raise UsageError(f"{ell.shape[1]} columns but {log_pi_tilde.shape[0]} themes")
    logits = ell + log_pi_tilde
    if np.any(np.isnan(logits)) or np.any(np.isposinf(logits)):
        raise DegeneracyError("non-finite responsibility logits")
    row_max = logits.max(axis=1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise DegeneracyError("every theme has zero likelihood for some point")
    r = np.exp(logits - row_max)
    r /= r.sum(axis=1, keepdims=True)
    tiny = r < _UNDERFLOW
    if np.any(tiny):
        r[tiny] = 0.0
        r /= r.sum(axis=1, keepdims=True)
    return r


def update_gamma(alpha, responsibilities):
    """gamma_k = alpha_k + sum_n r_nk."""
    alpha = as_concentration(alpha, "alpha", min_size=1)
    r = np.asarray(responsibilities, dtype=np.float64).reshape(-1, alpha.shape[0])
    return alpha + r.sum(axis=0)


def run_estep(
    posts,
    model,
    threshold=DEFAULT_THRESHOLD,
    max_iters=DEFAULT_MAX_ITERS,
    init_gamma=None,
    expected_logliks=None,
):
    """Coordinate ascent on (r, gamma) for one task with the themes held fixed.

    Starts from gamma = alpha + N/K unless ``init_gamma`` is given, and stops
    once the mean absolute change of gamma falls below ``threshold``.
    """
    if threshold <= 0 or max_iters < 1:
        raise UsageError("threshold must be > 0 and max_iters >= 1")
    ell = expected_logliks
    if ell is None:
        ell = expected_loglik_matrix(posts, model)
    n, k = ell.shape
    if n < 1:
        raise UsageError("E-step needs at least one point")
    alpha = model.alpha
    gamma = alpha + n / k if init_gamma is None else np.array(init_gamma, dtype=np.float64)
    for it in range(1, max_iters + 1):
        r = compute_responsibilities(ell, expected_log_pi(gamma))
        new_gamma = update_gamma(alpha, r)
        change = np.mean(np.abs(new_gamma - gamma))
        gamma = new_gamma
        if change < threshold:
            break
    return TaskPosterior(gamma, r, it)


def lda_elbo(posts, model, tp, expected_logliks=None):
    """Evaluate the five terms of the LDA lower bound for one task."""
    ell = expected_logliks
    if ell is None:
        ell = expected_loglik_matrix(posts, model)
    r = tp.responsibilities
    if r.shape != ell.shape:
        raise UsageError(f"responsibilities {r.shape} do not match {ell.shape}")
    alpha = model.alpha
    gamma = tp.gamma
    log_pi = expected_log_pi(gamma)
    r_log_r = np.where(r > 0.0, r * np.log(np.where(r > 0.0, r, 1.0)), 0.0)
    return ElboBreakdown(
        expected_loglik=float(np.sum(r * ell)),
        expected_log_pz=float(np.sum(r @ log_pi)),
        expected_log_pprior=-log_beta(alpha) + float(np.sum((alpha - 1.0) * log_pi)),
        entropy_qz=-float(np.sum(r_log_r)),
        entropy_qpi=log_beta(gamma) - float(np.sum((gamma - 1.0) * log_pi)),
    )
