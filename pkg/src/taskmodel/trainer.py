"""Online training of task-themes, alpha and the encoder/decoder networks.

Each task is split into a train half, used for the E-step, and a validation
half, on which the meta-objective is evaluated: the LDA bound under the
train-half posterior, the continuous-Bernoulli reconstruction, the
prototypical classification log-likelihood and the entropy of q(u).
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.cluster.vq import kmeans2

from taskmodel.dirichlet import expected_log_pi
from taskmodel.errors import ConfigError, DegeneracyError, UsageError
from taskmodel.estep import (
    TaskPosterior,
    compute_responsibilities,
    lda_elbo,
    run_estep,
)
from taskmodel.mstep import (
    accumulate_stats,
    alpha_newton_step,
    learning_rate,
    local_theme_mle,
    online_blend,
    per_task_alpha_step,
)
from taskmodel.network import (
    LAMBDA_CLIP,
    DenseNetwork,
    adam_init,
    adam_step,
    cb_log_likelihood,
    cb_log_likelihood_grad,
    decode_with_cache,
    encode_with_cache,
    init_network,
    prototypical_loss_grad,
)
from taskmodel.themes import (
    LOG_2PI,
    EmbeddingPosterior,
    TaskTheme,
    ThemeSet,
    expected_loglik_matrix,
)

__all__ = [
    "TaskDataset",
    "TrainConfig",
    "ModelState",
    "TaskResult",
    "BatchReport",
    "init_state",
    "encode_task",
    "task_objective",
    "train_minibatch",
    "train",
    "generate_synthetic_task",
    "logistic",
    "logit",
]

log = logging.getLogger(__name__)


def logistic(u):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(u, dtype=np.float64)))


def logit(x):
    x = np.asarray(x, dtype=np.float64)
    return np.log(x) - np.log1p(-x)


@dataclass(frozen=True, eq=False)
class TaskDataset:
    """Points in [0, 1]^P with integer labels and a train/validation split."""

    points: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        train_idx = np.asarray(self.train_idx, dtype=np.int64).reshape(-1)
        val_idx = np.asarray(self.val_idx, dtype=np.int64).reshape(-1)
        n = points.shape[0]
        if labels.shape[0] != n:
            raise UsageError(f"{n} points but {labels.shape[0]} labels")
        if not np.all(np.isfinite(points)) or np.any(points < 0.0) or np.any(points > 1.0):
            raise UsageError("points must be finite and lie in [0, 1]")
        if train_idx.size == 0 or val_idx.size == 0:
            raise UsageError("both split halves must be non-empty")
        both = np.concatenate([train_idx, val_idx])
        if both.size != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise UsageError("split halves must be disjoint and cover every point")
        for name, arr in (("points", points), ("labels", labels), ("train_idx", train_idx), ("val_idx", val_idx)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_arrays(cls, points, labels, train_idx=None):
        """Build a task; by default the first ceil(N/2) points form the train half."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        if train_idx is None:
            train_idx = np.arange((n + 1) // 2)
        train_idx = np.asarray(train_idx, dtype=np.int64)
        val_idx = np.setdiff1d(np.arange(n), train_idx)
        return cls(points, labels, train_idx, val_idx)

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def width(self):
        return self.points.shape[1]

    def train_part(self):
        return self.points[self.train_idx], self.labels[self.train_idx]

    def val_part(self):
        return self.points[self.val_idx], self.labels[self.val_idx]


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    ``codec="identity"`` replaces the networks by the fixed map
    u = logit(x[:D]) with constant s, which isolates the theme learning.
    """

    n_themes: int = 8
    dim: int = 8
    alpha_init: float = 1.1
    tau0: float = 1e6
    tau1: float = 0.5
    batch_size: int = 20
    episodes: int = 10_000
    estep_threshold: float = 1e-3
    estep_max_iters: int = 100
    adam_lr: float = 2e-4
    seed: int = 0
    hidden: tuple = (64, 32)
    codec: str = "network"
    identity_s: float = 1e-3
    w_lda: float = 1.0
    w_recon: float = 1.0
    w_cls: float = 1.0
    w_entropy: float = 1.0
    stats_half: str = "validation"
    alpha_mode: str = "pooled"
    log_every: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_themes < 2:
            raise ConfigError("n_themes (K) must be at least 2")
        if self.dim < 1:
            raise ConfigError("dim (D) must be positive")
        if not (self.alpha_init > 0 and math.isfinite(self.alpha_init)):
            raise ConfigError("alpha_init must be positive")
        if self.tau0 < 1:
            raise ConfigError("tau0 must be >= 1 so that every step size is at most 1")
        learning_rate(0, self.tau0, self.tau1)
        if self.batch_size < 1 or self.episodes < 0:
            raise ConfigError("batch_size must be >= 1 and episodes >= 0")
        if self.estep_threshold <= 0 or self.estep_max_iters < 1:
            raise ConfigError("E-step threshold must be > 0 and max iterations >= 1")
        if self.adam_lr < 0:
            raise ConfigError("adam_lr must be non-negative")
        if self.codec not in ("network", "identity"):
            raise ConfigError(f"unknown codec {self.codec!r}")
        if self.identity_s <= 0:
            raise ConfigError("identity_s must be positive")
        if self.stats_half not in ("validation", "train"):
            raise ConfigError(f"unknown stats_half {self.stats_half!r}")
        if self.alpha_mode not in ("pooled", "per_task"):
            raise ConfigError(f"unknown alpha_mode {self.alpha_mode!r}")
        if self.log_every < 1:
            raise ConfigError("log_every must be positive")

    def to_dict(self):
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, values):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**values)


@dataclass(frozen=True, eq=False)
class ModelState:
    """Global model state: theme parameters, networks with their optimiser moments, and the step counter."""

    themes: ThemeSet
    encoder: DenseNetwork = None
    decoder: DenseNetwork = None
    encoder_adam: object = None
    decoder_adam: object = None
    step: int = 0
    data_width: int = 0
    codec: str = "network"
    identity_s: float = 1e-3

    @property
    def dim(self):
        return self.themes.dim


def encode_task(points, state):
    """Embedding posteriors for the rows of ``points``."""
    return _encode(points, state)[0]


def _encode(points, state):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if state.codec == "identity":
        d = state.dim
        if points.shape[1] < d:
            raise UsageError("identity codec needs data width >= embedding dimension")
        x = np.clip(points[:, :d], 1e-12, 1.0 - 1e-12)
        return EmbeddingPosterior(logit(x), np.full((points.shape[0], d), state.identity_s)), None, None
    return encode_with_cache(points, state.encoder)


KMEANS_RESTARTS = 10


def _kmeans_centres(points, k, rng, restarts=KMEANS_RESTARTS):
    """Lowest-distortion k-means solution over several k-means++ restarts."""
    best, best_cost = None, np.inf
    for _ in range(restarts):
        centres, labels = kmeans2(points, k, minit="++", seed=rng)
        cost = float(np.sum((points - centres[labels]) ** 2))
        if cost < best_cost:
            best, best_cost = centres, cost
    return best


def init_state(cfg, data_width, warmup_points, rng):
    """Fresh networks and themes.

    Theme means are k-means centres of the warm-up embeddings (best of
    several k-means++ restarts); covariances start at the identity.
    """
    d, k = cfg.dim, cfg.n_themes
    encoder = decoder = enc_adam = dec_adam = None
    if cfg.codec == "network":
        encoder = init_network((data_width, *cfg.hidden, 2 * d), rng)
        decoder = init_network((d, *reversed(cfg.hidden), data_width), rng)
        enc_adam = adam_init(encoder.params, lr=cfg.adam_lr)
        dec_adam = adam_init(decoder.params, lr=cfg.adam_lr)
    state = ModelState(
        themes=ThemeSet(tuple(TaskTheme.from_moments(np.zeros(d), np.eye(d)) for _ in range(k)),
                        np.full(k, cfg.alpha_init)),
        encoder=encoder,
        decoder=decoder,
        encoder_adam=enc_adam,
        decoder_adam=dec_adam,
        step=0,
        data_width=data_width,
        codec=cfg.codec,
        identity_s=cfg.identity_s,
    )
    means = _kmeans_centres(encode_task(warmup_points, state).m, k, rng)
    themes = tuple(TaskTheme.from_moments(mu, np.eye(d)) for mu in means)
    return replace(state, themes=ThemeSet(themes, np.full(k, cfg.alpha_init)))


@dataclass(frozen=True, eq=False)
class TaskResult:
    """Outcome of one task's objective evaluation."""

    objective: float
    components: dict
    encoder_grads: tuple
    decoder_grads: tuple
    posterior: TaskPosterior
    stats_entry: tuple
    estep_iterations: int


def task_objective(task, state, rng, cfg, frozen=None):
    """Validation-half objective of one task and its network gradients.

    ``frozen=(gamma, r_val)`` skips the E-step and reuses the given posterior,
    which is how the E-step outputs are held constant for gradient checks.
    """
    model = state.themes
    posts, _, enc_cache = _encode(task.points, state)
    tr, va = task.train_idx, task.val_idx
    train_posts, val_posts = posts.subset(tr), posts.subset(va)
    n, d = posts.m.shape

    if frozen is None:
        tp = run_estep(train_posts, model, cfg.estep_threshold, cfg.estep_max_iters)
        gamma, iterations = tp.gamma, tp.iterations
    else:
        tp = None
        gamma, iterations = np.asarray(frozen[0], dtype=np.float64), 0
    ell_v = expected_loglik_matrix(val_posts, model)
    if frozen is None:
        r_v = compute_responsibilities(ell_v, expected_log_pi(gamma))
    else:
        r_v = np.asarray(frozen[1], dtype=np.float64)
    val_tp = TaskPosterior(gamma, r_v, iterations)
    elbo = lda_elbo(val_posts, model, val_tp, expected_logliks=ell_v)

    m, s = posts.m, posts.s
    s_v = s[va]
    entropy = float(0.5 * s_v.size * (1.0 + LOG_2PI) + np.sum(np.log(s_v)))
    components = {"lda": elbo.total, "entropy": entropy, "recon": 0.0, "cls": 0.0}
    enc_grads = dec_grads = None

    if state.codec == "network":
        dm = np.zeros((n, d))
        ds = np.zeros((n, d))
        dlogvar = np.zeros((n, d))
        m_v = m[va]
        for j, theme in enumerate(model.themes):
            w = cfg.w_lda * r_v[:, j, None]
            dm[va] -= w * theme.solve((m_v - theme.mean).T).T
            ds[va] -= w * theme.prec_diag * s_v
        dlogvar[va] += 0.5 * cfg.w_entropy

        noise = rng.standard_normal((n, d))
        u = m + s * noise
        du = np.zeros((n, d))

        x_v = task.points[va]
        lam, raw, dec_cache = decode_with_cache(u[va], state.decoder)
        components["recon"] = cb_log_likelihood(x_v, lam)
        inside = (lam > LAMBDA_CLIP) & (lam < 1.0 - LAMBDA_CLIP)
        dlam = cb_log_likelihood_grad(x_v, lam)
        draw = cfg.w_recon * dlam * lam * (1.0 - lam) * inside
        dec_grads, du_v = state.decoder.backward(dec_cache, draw)
        du[va] += du_v

        y_t, y_v = task.labels[tr], task.labels[va]
        query = np.isin(y_v, y_t)
        if np.any(query):
            n_q = int(query.sum())
            loss, d_tr, d_q = prototypical_loss_grad(u[tr], y_t, u[va][query], y_v[query])
            components["cls"] = -n_q * loss
            du[tr] -= cfg.w_cls * n_q * d_tr
            rows = va[query]
            du[rows] -= cfg.w_cls * n_q * d_q

        dm += du
        ds += du * noise
        dlogvar += ds * 0.5 * s
        enc_grads, _ = state.encoder.backward(enc_cache, np.concatenate([dm, dlogvar], axis=1))

    objective = (
        cfg.w_lda * components["lda"]
        + cfg.w_recon * components["recon"]
        + cfg.w_cls * components["cls"]
        + cfg.w_entropy * components["entropy"]
    )
    if cfg.stats_half == "validation":
        stats_entry = (val_posts, val_tp)
    else:
        if tp is None:
            r_t = compute_responsibilities(expected_loglik_matrix(train_posts, model), expected_log_pi(gamma))
            tp = TaskPosterior(gamma, r_t, 0)
        stats_entry = (train_posts, tp)
    return TaskResult(objective, components, enc_grads, dec_grads, val_tp, stats_entry, iterations)


@dataclass(frozen=True)
class BatchReport:
    step: int
    rho: float
    objective_mean: float
    tasks_used: int
    tasks_skipped: int
    alpha: tuple = field(default_factory=tuple)


def _minibatch(batch, state, cfg, rng):
    batch = list(batch)
    if not batch:
        raise UsageError("empty mini-batch")
    results = []
    skipped = 0
    for idx, task in enumerate(batch):
        try:
            results.append(task_objective(task, state, rng, cfg))
        except DegeneracyError as exc:
            skipped += 1
            log.warning("skipping task %d of batch %d: %s", idx, state.step, exc)
    if not results:
        raise DegeneracyError(f"every task in batch {state.step} was skipped")

    encoder, decoder = state.encoder, state.decoder
    enc_adam, dec_adam = state.encoder_adam, state.decoder_adam
    if state.codec == "network":
        count = len(results)
        enc_mean = [sum(r.encoder_grads[i] for r in results) / count for i in range(len(encoder.params))]
        dec_mean = [sum(r.decoder_grads[i] for r in results) / count for i in range(len(decoder.params))]
        enc_params, enc_adam = adam_step(encoder.params, enc_mean, enc_adam)
        dec_params, dec_adam = adam_step(decoder.params, dec_mean, dec_adam)
        encoder, decoder = encoder.with_params(enc_params), decoder.with_params(dec_params)

    stats = accumulate_stats([r.stats_entry for r in results])
    model = state.themes
    locals_ = local_theme_mle(stats)
    if cfg.alpha_mode == "pooled":
        alpha_step = alpha_newton_step(model.alpha, stats).step
    else:
        alpha_step = per_task_alpha_step(model.alpha, stats)
    rho = learning_rate(state.step, cfg.tau0, cfg.tau1)
    themes = online_blend(model, locals_, alpha_step, rho)

    new_state = replace(
        state,
        themes=themes,
        encoder=encoder,
        decoder=decoder,
        encoder_adam=enc_adam,
        decoder_adam=dec_adam,
        step=state.step + 1,
    )
    report = BatchReport(
        step=state.step,
        rho=rho,
        objective_mean=float(np.mean([r.objective for r in results])),
        tasks_used=len(results),
        tasks_skipped=skipped,
        alpha=tuple(float(a) for a in themes.alpha),
    )
    return new_state, report


def train_minibatch(batch, state, cfg, rng):
    """Apply one mini-batch: network Adam step, pooled M-step, online blend."""
    return _minibatch(batch, state, cfg, rng)[0]


def train(tasks, cfg, state=None, callback=None):
    """Run ``cfg.episodes`` task visits in mini-batches over a task list.

    Tasks are visited in a seeded random order, reshuffled every pass. A
    progress line is logged every ``cfg.log_every`` mini-batches.
    """
    tasks = list(tasks)
    if not tasks:
        raise UsageError("no training tasks")
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        warm = np.concatenate([t.points for t in tasks[: cfg.batch_size]])
        state = init_state(cfg, tasks[0].width, warm, rng)
    n_batches = cfg.episodes // cfg.batch_size
    order = []
    window = []
    for b in range(n_batches):
        batch = []
        while len(batch) < cfg.batch_size:
            if not order:
                order = list(rng.permutation(len(tasks)))
            batch.append(tasks[order.pop()])
        state, report = _minibatch(batch, state, cfg, rng)
        window.append(report.objective_mean)
        if callback is not None:
            callback(state, report)
        if (b + 1) % cfg.log_every == 0:
            log.info(
                "batch %d objective_mean=%.6g rho=%.6g alpha=%s",
                b + 1,
                float(np.mean(window)),
                report.rho,
                np.array2string(np.asarray(report.alpha), precision=4),
            )
            window = []
    return state


def generate_synthetic_task(themes, n_points, rng, decode=False, decoder=None, data_width=None):
    """Sample one task from the generative process.

    pi ~ Dirichlet(alpha), z_n ~ Categorical(pi), u_n ~ N(mu_z, Sigma_z). With
    ``decode`` the points are the decoder's mean output h(u); otherwise
    x = logistic(u), padded with 0.5 (logistic of 0) or truncated to
    ``data_width``. Labels are the theme indices z.
    """
    if n_points < 2:
        raise UsageError("a task needs at least 2 points")
    k, d = themes.n_themes, themes.dim
    pi = rng.dirichlet(themes.alpha) if k > 1 else np.ones(1)
    z = rng.choice(k, size=n_points, p=pi) if k > 1 else np.zeros(n_points, dtype=np.int64)
    u = np.empty((n_points, d))
    for j in range(k):
        rows = np.flatnonzero(z == j)
        if rows.size:
            u[rows] = themes.themes[j].mean + rng.standard_normal((rows.size, d)) @ themes.themes[j].chol.T
    if decode:
        if decoder is None:
            raise UsageError("decode=True needs a decoder network")
        x = decode_with_cache(u, decoder)[0]
    else:
        width = d if data_width is None else data_width
        x = np.full((n_points, width), 0.5)
        cols = min(width, d)
        x[:, :cols] = logistic(u[:, :cols])
    return TaskDataset.from_arrays(x, z)
