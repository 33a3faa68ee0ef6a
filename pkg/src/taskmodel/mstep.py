"""Mini-batch M-step: pooled statistics, local themes, alpha Newton step, online blend."""

from dataclasses import dataclass

import numpy as np

from taskmodel.dirichlet import expected_log_pi
from taskmodel.errors import ConfigError, DegeneracyError, UsageError
from taskmodel.special import digamma, trigamma
from taskmodel.themes import TaskTheme, ThemeSet, make_theme

__all__ = [
    "SufficientStats",
    "AlphaNewton",
    "accumulate_stats",
    "local_theme_mle",
    "alpha_newton_step",
    "per_task_alpha_step",
    "learning_rate",
    "online_blend",
    "ALPHA_MIN",
    "UNSUPPORTED_MASS",
]

ALPHA_MIN = 1e-3
UNSUPPORTED_MASS = 1e-8


@dataclass(frozen=True, eq=False)
class SufficientStats:
    """Responsibility-weighted sums pooled over the tasks of a mini-batch."""

    n_k: np.ndarray
    weighted_mean_sum: np.ndarray
    weighted_scatter: np.ndarray
    gamma_list: tuple
    task_count: int

    @property
    def centers(self):
        """Local means (weighted_mean_sum / n_k); NaN rows for empty themes."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.weighted_mean_sum / self.n_k[:, None]


@dataclass(frozen=True, eq=False)
class AlphaNewton:
    """Newton step H^-1 g for alpha with H = diag(q) + a 11^T."""

    gradient: np.ndarray
    q_diag: np.ndarray
    a: float
    b: float
    step: np.ndarray


def accumulate_stats(tasks):
    """Pool sufficient statistics over (EmbeddingPosterior, TaskPosterior) pairs.

    Two passes: the first gives n_k and the weighted mean sums, the second the
    scatter around the resulting local means.
    """
    tasks = list(tasks)
    if not tasks:
        raise UsageError("empty batch")
    k = tasks[0][1].responsibilities.shape[1]
    d = tasks[0][0].dim
    n_k = np.zeros(k)
    mean_sum = np.zeros((k, d))
    for post, tp in tasks:
        r = tp.responsibilities
        m = np.atleast_2d(post.m)
        if r.shape != (m.shape[0], k) or m.shape[1] != d:
            raise UsageError("inconsistent dimensions in batch")
        n_k += r.sum(axis=0)
        mean_sum += r.T @ m
    with np.errstate(invalid="ignore", divide="ignore"):
        centers = np.where(n_k[:, None] > 0.0, mean_sum / n_k[:, None], 0.0)
    scatter = np.zeros((k, d, d))
    for post, tp in tasks:
        r = tp.responsibilities
        m = np.atleast_2d(post.m)
        var = np.atleast_2d(post.s) ** 2
        for j in range(k):
            diff = m - centers[j]
            scatter[j] += (r[:, j, None] * diff).T @ diff
            scatter[j] += np.diag(r[:, j] @ var)
    return SufficientStats(
        n_k=n_k,
        weighted_mean_sum=mean_sum,
        weighted_scatter=scatter,
        gamma_list=tuple(np.asarray(tp.gamma, dtype=np.float64) for _, tp in tasks),
        task_count=len(tasks),
    )


def local_theme_mle(stats, floor=True):
    """Local means and covariances per theme; None where n_k < 1e-8.

    With ``floor`` the covariance receives the same diagonal floor as
    `make_theme`, and the candidates are returned as TaskTheme objects.
    """
    out = []
    for j in range(stats.n_k.shape[0]):
        nk = stats.n_k[j]
        if nk < UNSUPPORTED_MASS:
            out.append(None)
            continue
        mean = stats.weighted_mean_sum[j] / nk
        cov = stats.weighted_scatter[j] / nk
        out.append(make_theme(mean, cov) if floor else (mean, cov))
    if all(c is None for c in out):
        raise DegeneracyError("no theme carries responsibility mass")
    return out


def _newton(alpha, gammas, count):
    alpha = np.asarray(alpha, dtype=np.float64)
    e_log_pi = sum(expected_log_pi(g) for g in gammas)
    g = count * (digamma(alpha.sum()) - digamma(alpha)) + e_log_pi
    q = -count * trigamma(alpha)
    a = count * trigamma(alpha.sum())
    b = np.sum(g / q) / (1.0 / a + np.sum(1.0 / q))
    return AlphaNewton(gradient=g, q_diag=q, a=float(a), b=float(b), step=(g - b) / q)


def alpha_newton_step(alpha, stats):
    """Newton step for alpha from the batch's pooled Dirichlet posteriors."""
    if not stats.gamma_list:
        raise UsageError("no task posteriors in statistics")
    return _newton(alpha, stats.gamma_list, stats.task_count)


def per_task_alpha_step(alpha, stats):
    """Average of single-task Newton steps (T = 1 each) over the batch."""
    if not stats.gamma_list:
        raise UsageError("no task posteriors in statistics")
    return np.mean([_newton(alpha, [g], 1).step for g in stats.gamma_list], axis=0)


def learning_rate(i, tau0, tau1):
    """Online step size (tau0 + i) ** -tau1.

    tau1 = 0.5 is admitted alongside (0.5, 1] because it is the value used in
    practice for this model.
    """
    if tau0 < 0 or not (0.5 <= tau1 <= 1.0) or i < 0:
        raise ConfigError(f"need tau0 >= 0, tau1 in [0.5, 1], i >= 0; got {tau0}, {tau1}, {i}")
    if tau0 + i <= 0:
        raise ConfigError("tau0 + i must be positive")
    return float((tau0 + i) ** -tau1)


def online_blend(model, local_themes, alpha_step, rho):
    """Move the global model toward the batch-local estimates by ``rho``.

    Themes without a local estimate (None) keep their previous value. The
    blended covariance is a convex combination of two positive definite
    matrices and is factorised as is; the floor is applied only if that fails.
    alpha takes a damped Newton step and is clamped to ``ALPHA_MIN``.
    """
    if not (0.0 < rho <= 1.0):
        raise UsageError(f"rho must be in (0, 1], got {rho}")
    if len(local_themes) != model.n_themes:
        raise UsageError("local theme count differs from the model")
    themes = []
    for old, new in zip(model.themes, local_themes):
        if new is None:
            themes.append(old)
            continue
        if isinstance(new, TaskTheme):
            new_mean, new_cov = new.mean, new.cov
        else:
            new_mean, new_cov = new
        mean = (1.0 - rho) * old.mean + rho * np.asarray(new_mean)
        cov = (1.0 - rho) * old.cov + rho * np.asarray(new_cov)
        themes.append(TaskTheme.from_moments(mean, cov))
    step = rho * np.asarray(alpha_step, dtype=np.float64)
    alpha = model.alpha - step
    if np.any(alpha <= 0.0):
        alpha = model.alpha - 0.5 * step
    alpha = np.maximum(alpha, ALPHA_MIN)
    return ThemeSet(tuple(themes), alpha)
