"""Task representations with their KL distances, plus the lifelong task-selection simulator."""

import logging
from dataclasses import dataclass, field

import numpy as np

from taskmodel.dirichlet import dirichlet_entropy, pairwise_kl
from taskmodel.errors import DegeneracyError, UsageError
from taskmodel.estep import DEFAULT_MAX_ITERS, DEFAULT_THRESHOLD, run_estep
from taskmodel.network import (
    adam_init,
    adam_step,
    init_network,
    prototypes,
    prototypical_loss,
    prototypical_loss_grad,
)
from taskmodel.trainer import encode_task

__all__ = [
    "TaskRepresentation",
    "TaskPool",
    "SelectionPolicy",
    "ProtoLearner",
    "StateLearner",
    "LifelongReport",
    "POLICIES",
    "represent_task",
    "distance_matrix",
    "nearest_prototype_accuracy",
    "select_task",
    "run_lifelong",
    "ewma",
]

log = logging.getLogger(__name__)

POLICIES = ("entropy-max", "kl-min", "max-loss", "random")
LOG_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class TaskRepresentation:
    gamma: np.ndarray
    entropy: float
    source_id: str = ""


def represent_task(task, state, source_id="", split=False,
                   threshold=DEFAULT_THRESHOLD, max_iters=DEFAULT_MAX_ITERS):
    """Dirichlet posterior of a task's theme proportions and its entropy.

    All points are used unless ``split`` is set, in which case only the train
    half is encoded.
    """
    points = task.points[task.train_idx] if split else task.points
    posts = encode_task(points, state)
    try:
        tp = run_estep(posts, state.themes, threshold, max_iters)
    except DegeneracyError as exc:
        raise DegeneracyError(f"cannot represent task {source_id!r}: {exc}") from exc
    return TaskRepresentation(tp.gamma, dirichlet_entropy(tp.gamma), str(source_id))


def distance_matrix(reps, log_transform=False):
    """Matrix of KL[rep_i || rep_j]; rows are the first KL argument."""
    reps = list(reps)
    if len(reps) < 2:
        raise UsageError("need at least two representations")
    gammas = np.stack([r.gamma for r in reps])
    out = pairwise_kl(gammas, gammas)
    np.fill_diagonal(out, 0.0)
    if log_transform:
        out = np.log(LOG_EPS + np.maximum(out, 0.0))
    return out


def nearest_prototype_accuracy(train_u, train_y, val_u, val_y):
    """Fraction of validation points whose nearest class prototype has their label."""
    classes, protos = prototypes(train_u, train_y)
    d2 = np.sum((np.atleast_2d(val_u)[:, None, :] - protos[None]) ** 2, axis=2)
    pred = classes[np.argmin(d2, axis=1)]
    return float(np.mean(pred == np.asarray(val_y)))


@dataclass
class TaskPool:
    """Tasks currently available for selection, each with its representation."""

    capacity: int
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def pop(self, index):
        return self.entries.pop(index)


@dataclass
class SelectionPolicy:
    """How the next training task is picked from the pool.

    ``reference`` holds the test-task representations used by ``kl-min``.
    """

    kind: str
    seed: int = 0
    reference: tuple = ()

    def __post_init__(self):
        if self.kind not in POLICIES:
            raise UsageError(f"unknown policy {self.kind!r}; choose from {POLICIES}")
        self.reference = tuple(self.reference)
        if self.kind == "kl-min" and not self.reference:
            raise UsageError("kl-min needs reference representations")
        self.rng = np.random.default_rng(self.seed)

    @property
    def needs_representation(self):
        return self.kind in ("entropy-max", "kl-min")


class ProtoLearner:
    """Encoder trained with the prototypical loss; the default lifelong learner.

    The network maps data straight to embeddings. One `update` is a single
    Adam step on one task's loss.
    """

    def __init__(self, width, dim, rng, hidden=(32,), lr=1e-2):
        self.net = init_network((width, *hidden, dim), rng)
        self.adam = adam_init(self.net.params, lr=lr)

    def embed(self, points):
        return self.net(points)

    def _split(self, task):
        (x_t, y_t), (x_v, y_v) = task.train_part(), task.val_part()
        keep = np.isin(y_v, y_t)
        return x_t, y_t, x_v[keep], y_v[keep]

    def loss(self, task):
        x_t, y_t, x_v, y_v = self._split(task)
        if y_v.size == 0:
            return 0.0
        return prototypical_loss(self.embed(x_t), y_t, self.embed(x_v), y_v)

    def update(self, task):
        x_t, y_t, x_v, y_v = self._split(task)
        if y_v.size == 0:
            return
        n_t = x_t.shape[0]
        out, cache = self.net.forward(np.concatenate([x_t, x_v]))
        _, d_t, d_v = prototypical_loss_grad(out[:n_t], y_t, out[n_t:], y_v)
        grads, _ = self.net.backward(cache, -np.concatenate([d_t, d_v]))
        params, self.adam = adam_step(self.net.params, grads, self.adam)
        self.net = self.net.with_params(params)

    def accuracy(self, task):
        (x_t, y_t), (x_v, y_v) = task.train_part(), task.val_part()
        return nearest_prototype_accuracy(self.embed(x_t), y_t, self.embed(x_v), y_v)


class StateLearner(ProtoLearner):
    """Prototypical head on a trained model's embedding means; `update` is a no-op."""

    def __init__(self, state):
        self.state = state

    def embed(self, points):
        return encode_task(points, self.state).m

    def update(self, task):
        pass


def select_task(pool, policy, learner=None):
    """Index of the pool entry the policy picks; ties go to the lowest index."""
    if not len(pool):
        raise UsageError("empty pool")
    if policy.kind == "random":
        return int(policy.rng.integers(len(pool)))
    if policy.kind == "max-loss":
        if learner is None:
            raise UsageError("max-loss needs a learner")
        return int(np.argmax([learner.loss(task) for task, _ in pool.entries]))
    reps = [rep for _, rep in pool.entries]
    if any(rep is None for rep in reps):
        raise UsageError(f"{policy.kind} needs task representations")
    if policy.kind == "entropy-max":
        return int(np.argmax([rep.entropy for rep in reps]))
    refs = np.stack([ref.gamma for ref in policy.reference])
    scores = pairwise_kl(refs, np.stack([rep.gamma for rep in reps])).mean(axis=0)
    return int(np.argmin(scores))


@dataclass
class LifelongReport:
    steps: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    selected: list = field(default_factory=list)

    def smoothed(self, weight=0.98):
        return ewma(self.accuracy, weight)


def run_lifelong(source, policy, learner, steps, eval_tasks, state=None,
                 pool_size=200, eval_every=1):
    """Lifelong loop: train on the task the policy picks, then refill the pool from ``source``.

    ``source`` yields tasks; ``state`` is the trained task model used for
    representations (required by entropy-max and kl-min). The learner's mean
    accuracy over ``eval_tasks`` is recorded after every ``eval_every`` steps.
    ``report.selected`` holds the running source index of each chosen task.
    """
    if steps < 0 or pool_size < 1 or eval_every < 1:
        raise UsageError("steps >= 0, pool_size >= 1 and eval_every >= 1 required")
    if policy.needs_representation and state is None:
        raise UsageError(f"{policy.kind} needs a trained task model")
    report = LifelongReport()
    if steps == 0:
        return report
    source = iter(source)
    counter = 0
    pool = TaskPool(pool_size)
    ids = []

    def refill():
        nonlocal counter
        while len(pool) < pool.capacity:
            try:
                task = next(source)
            except StopIteration:
                return False
            rep = represent_task(task, state, source_id=counter) if policy.needs_representation else None
            pool.entries.append((task, rep))
            ids.append(counter)
            counter += 1
        return True

    exhausted = not refill()
    for step in range(1, steps + 1):
        if not len(pool):
            log.warning("task source exhausted after %d steps", step - 1)
            break
        idx = select_task(pool, policy, learner)
        task, _ = pool.pop(idx)
        report.selected.append(ids.pop(idx))
        learner.update(task)
        if step % eval_every == 0:
            report.steps.append(step)
            report.accuracy.append(float(np.mean([learner.accuracy(t) for t in eval_tasks])))
        if not exhausted:
            exhausted = not refill()
    return report


def ewma(series, weight):
    """Exponentially weighted moving average, y_0 = x_0."""
    if not (0.0 <= weight < 1.0):
        raise UsageError("weight must lie in [0, 1)")
    out = []
    prev = None
    for x in series:
        prev = float(x) if prev is None else weight * prev + (1.0 - weight) * float(x)
        out.append(prev)
    return out
