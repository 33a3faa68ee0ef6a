"""Gaussian task-themes and their coupling to diagonal-Gaussian embeddings.

Themes are immutable. Updating a theme means building a new one, either with
`make_theme` (applies the covariance floor) or `TaskTheme.from_moments`
(factorises as given, flooring only if factorisation fails).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from taskmodel.dirichlet import as_concentration
from taskmodel.errors import DegeneracyError, UsageError

__all__ = [
    "TaskTheme",
    "ThemeSet",
    "EmbeddingPosterior",
    "make_theme",
    "gaussian_log_density",
    "expected_gaussian_loglik",
    "expected_loglik_matrix",
    "FLOOR_SCALE",
]

LOG_2PI = math.log(2.0 * math.pi)
FLOOR_SCALE = 1e-6
_MAX_ESCALATIONS = 3


def _floor(cov, scale):
    d = cov.shape[0]
    eps = scale * max(np.trace(cov) / d, 0.0)
    if eps == 0.0:
        eps = scale
    return cov + eps * np.eye(d)


def _factorize(cov, floor_first):
    """Cholesky factor of ``cov``, escalating the diagonal floor on failure.

    Returns (possibly floored covariance, lower factor).
    """
    scales = [FLOOR_SCALE * 10.0**i for i in range(_MAX_ESCALATIONS + 1)]
    if not floor_first:
        scales.insert(0, 0.0)
    for scale in scales:
        attempt = _floor(cov, scale) if scale > 0.0 else cov
        try:
            chol = np.linalg.cholesky(attempt)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(chol)) and np.all(np.diag(chol) > 0.0):
            return attempt, chol
    raise DegeneracyError("covariance is not positive definite after flooring")


@dataclass(frozen=True, eq=False)
class TaskTheme:
    """One Gaussian task-theme N(mean, cov) with a cached Cholesky factor."""

    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray = field(repr=False)
    logdet: float = field(repr=False)
    prec_diag: np.ndarray = field(repr=False)

    @classmethod
    def from_moments(cls, mean, cov):
        mean = np.array(mean, dtype=np.float64).reshape(-1)
        cov = np.array(cov, dtype=np.float64)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise UsageError(f"covariance shape {cov.shape} does not match mean of length {d}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10):
            raise UsageError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        cov, chol = _factorize(cov, floor_first=False)
        return cls._build(mean, cov, chol)

    @classmethod
    def _build(cls, mean, cov, chol):
        mean.setflags(write=False)
        cov.setflags(write=False)
        chol.setflags(write=False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        inv_chol = solve_triangular(chol, np.eye(mean.shape[0]), lower=True)
        prec_diag = np.sum(inv_chol**2, axis=0)
        prec_diag.setflags(write=False)
        return cls(mean, cov, chol, logdet, prec_diag)

    @property
    def dim(self):
        return self.mean.shape[0]

    def solve(self, rhs):
        """cov^-1 @ rhs via the cached factor."""
        return cho_solve((self.chol, True), rhs)


def make_theme(mean, cov):
    """Build a theme after adding the covariance floor eps*I, eps = 1e-6 tr/D."""
    mean = np.array(mean, dtype=np.float64).reshape(-1)
    cov = np.array(cov, dtype=np.float64)
    d = mean.shape[0]
    if cov.shape != (d, d):
        raise UsageError(f"covariance shape {cov.shape} does not match mean of length {d}")
    cov = 0.5 * (cov + cov.T)
    cov, chol = _factorize(cov, floor_first=True)
    return TaskTheme._build(mean, cov, chol)


@dataclass(frozen=True, eq=False)
class ThemeSet:
    """K task-themes plus the Dirichlet prior alpha over their proportions."""

    themes: tuple
    alpha: np.ndarray

    def __post_init__(self):
        themes = tuple(self.themes)
        alpha = as_concentration(self.alpha, "alpha", min_size=1).copy()
        if len(themes) != alpha.shape[0]:
            raise UsageError(f"{len(themes)} themes but alpha has {alpha.shape[0]} components")
        dims = {t.dim for t in themes}
        if len(dims) != 1:
            raise UsageError("themes have inconsistent dimensions")
        alpha.setflags(write=False)
        object.__setattr__(self, "themes", themes)
        object.__setattr__(self, "alpha", alpha)

    @property
    def n_themes(self):
        return len(self.themes)

    @property
    def dim(self):
        return self.themes[0].dim

    def means(self):
        return np.stack([t.mean for t in self.themes])

    def covariances(self):
        return np.stack([t.cov for t in self.themes])


@dataclass(frozen=True, eq=False)
class EmbeddingPosterior:
    """Diagonal Gaussian q(u) = N(m, diag(s^2)).

    ``m`` and ``s`` may carry leading batch axes, e.g. (N, D) for the N points
    of a task.
    """

    m: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        s = np.asarray(self.s, dtype=np.float64)
        if m.shape != s.shape or m.ndim == 0:
            raise UsageError(f"m shape {m.shape} and s shape {s.shape} differ")
        # s == 0 (a point mass) is admitted for sufficient-statistic work
        if not np.all(np.isfinite(s) & (s >= 0.0)):
            raise UsageError("s must be non-negative and finite")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "s", s)

    @property
    def dim(self):
        return self.m.shape[-1]

    def __len__(self):
        return self.m.shape[0] if self.m.ndim > 1 else 1

    def subset(self, idx):
        return EmbeddingPosterior(self.m[idx], self.s[idx])


def _check_dim(x, theme):
    if x.shape[-1] != theme.dim:
        raise UsageError(f"dimension mismatch: {x.shape[-1]} vs theme dimension {theme.dim}")


def gaussian_log_density(x, theme):
    """ln N(x; mean, cov), solved through the cached factor."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(x, theme)
    diff = (x - theme.mean).reshape(-1, theme.dim)
    white = solve_triangular(theme.chol, diff.T, lower=True)
    maha = np.sum(white**2, axis=0)
    out = -0.5 * (theme.dim * LOG_2PI + theme.logdet + maha)
    return float(out[0]) if x.ndim == 1 else out.reshape(x.shape[:-1])


def expected_gaussian_loglik(post, theme):
    """E_q(u)[ln N(u; mean, cov)] = -1/2 tr(cov^-1 diag(s^2)) + ln N(m; mean, cov)."""
    _check_dim(post.m, theme)
    trace = (post.s**2) @ theme.prec_diag
    return gaussian_log_density(post.m, theme) - 0.5 * trace


def expected_loglik_matrix(post, model):
    """N x K matrix of expected log-likelihoods of each point under each theme."""
    m = np.atleast_2d(post.m)
    s = np.atleast_2d(post.s)
    flat = EmbeddingPosterior(m, s)
    return np.stack([expected_gaussian_loglik(flat, t) for t in model.themes], axis=1)

