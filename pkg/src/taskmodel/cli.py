"""Command-line interface: ``taskmodel <subcommand> ...``.

The log level is read from the TASKMODEL_LOG_LEVEL environment variable
(default INFO); log lines go to stderr and CSV output to --out or stdout.
"""

import argparse
import contextlib
import logging
import math
import os
import sys

import numpy as np

from taskmodel.analytics import (
    POLICIES,
    ProtoLearner,
    SelectionPolicy,
    StateLearner,
    TaskPool,
    distance_matrix,
    ewma,
    represent_task,
    run_lifelong,
    select_task,
)
from taskmodel.errors import TaskModelError, UsageError
from taskmodel.io import (
    Corpus,
    check_compatible,
    load_checkpoint,
    load_config,
    load_corpus,
    save_checkpoint,
    save_corpus,
    write_csv,
)
from taskmodel.themes import TaskTheme, ThemeSet
from taskmodel.trainer import TrainConfig, generate_synthetic_task, train

__all__ = ["main", "build_parser", "theme_layout"]

log = logging.getLogger("taskmodel")

LOG_ENV = "TASKMODEL_LOG_LEVEL"

# TrainConfig fields exposed as flags; each overrides the config file.
_TRAIN_FLAGS = {
    "n_themes": int,
    "dim": int,
    "alpha_init": float,
    "tau0": float,
    "tau1": float,
    "batch_size": int,
    "episodes": int,
    "adam_lr": float,
    "codec": str,
    "identity_s": float,
    "stats_half": str,
    "alpha_mode": str,
    "log_every": int,
}


def theme_layout(n_themes, dim, separation, sigma):
    """Means with neighbouring themes ``separation * sigma`` apart.

    In one dimension the means sit on a line; otherwise they lie on a circle
    in the first two coordinates.
    """
    gap = separation * sigma
    means = np.zeros((n_themes, dim))
    if dim == 1:
        means[:, 0] = (np.arange(n_themes) - 0.5 * (n_themes - 1)) * gap
        return means
    radius = gap / (2.0 * math.sin(math.pi / n_themes))
    angles = 2.0 * math.pi * np.arange(n_themes) / n_themes
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


@contextlib.contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _cmd_synth(args):
    means = theme_layout(args.themes, args.dim, args.separation, args.sigma)
    cov = args.sigma**2 * np.eye(args.dim)
    model = ThemeSet(tuple(TaskTheme.from_moments(m, cov) for m in means), np.full(args.themes, args.alpha))
    rng = np.random.default_rng(args.seed)
    width = args.width or args.dim
    tasks = [generate_synthetic_task(model, args.points, rng, data_width=width) for _ in range(args.tasks)]
    save_corpus(args.out, Corpus(tuple(tasks), args.themes))
    log.info("wrote %d tasks to %s", len(tasks), args.out)


def _cmd_train(args):
    corpus = load_corpus(args.corpus)
    values = load_config(args.config) if args.config else {}
    for name in _TRAIN_FLAGS:
        flag = getattr(args, name)
        if flag is not None:
            values[name] = flag
    if args.hidden is not None:
        values["hidden"] = args.hidden
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = TrainConfig.from_dict(values)
    state = None
    if args.resume:
        state, _ = load_checkpoint(args.resume)
        check_compatible(state, cfg, corpus.width)
    state = train(corpus.tasks, cfg, state=state)
    save_checkpoint(args.out, state, cfg)
    log.info("saved checkpoint after %d mini-batches to %s", state.step, args.out)


def _representations(state, corpus, split=False):
    return [represent_task(t, state, source_id=i, split=split) for i, t in enumerate(corpus.tasks)]


def _cmd_represent(args):
    state, _ = load_checkpoint(args.checkpoint)
    reps = _representations(state, load_corpus(args.corpus), args.split)
    k = state.themes.n_themes
    header = ["task", "entropy"] + [f"gamma_{j}" for j in range(k)]
    rows = [[i, r.entropy, *r.gamma] for i, r in enumerate(reps)]
    with _output(args.out) as fh:
        write_csv(fh, header, rows)


def _cmd_distance(args):
    state, _ = load_checkpoint(args.checkpoint)
    reps = _representations(state, load_corpus(args.corpus))
    dist = distance_matrix(reps, log_transform=args.log)
    header = ["task"] + [f"task_{j}" for j in range(len(reps))]
    with _output(args.out) as fh:
        write_csv(fh, header, [[i, *row] for i, row in enumerate(dist)])


def _policy(args, state):
    reference = ()
    if args.policy == "kl-min":
        if not args.reference:
            raise UsageError("kl-min needs --reference")
        reference = _representations(state, load_corpus(args.reference))
    return SelectionPolicy(args.policy, seed=args.seed, reference=reference)


def _cmd_select(args):
    state, _ = load_checkpoint(args.checkpoint)
    corpus = load_corpus(args.pool)
    policy = _policy(args, state)
    reps = _representations(state, corpus) if policy.needs_representation else [None] * len(corpus)
    pool = TaskPool(len(corpus), list(zip(corpus.tasks, reps)))
    ids = list(range(len(corpus)))
    learner = StateLearner(state)
    rows = []
    for rank in range(min(args.count, len(corpus))):
        idx = select_task(pool, policy, learner)
        pool.pop(idx)
        rows.append([rank, ids.pop(idx)])
    with _output(args.out) as fh:
        write_csv(fh, ["rank", "task"], rows)


def _cmd_simulate(args):
    state, _ = load_checkpoint(args.checkpoint)
    pool_corpus = load_corpus(args.pool)
    eval_corpus = load_corpus(args.eval)
    if args.policy == "kl-min" and not args.reference:
        args.reference = args.eval
    policy = _policy(args, state)
    learner = ProtoLearner(pool_corpus.width, args.embed_dim, np.random.default_rng(args.seed),
                           hidden=tuple(args.hidden), lr=args.lr)
    report = run_lifelong(iter(pool_corpus.tasks), policy, learner, args.steps, eval_corpus.tasks,
                          state=state, pool_size=args.pool_size, eval_every=args.eval_every)
    smooth = ewma(report.accuracy, args.ewma)
    rows = [[s, report.selected[s - 1], a, e] for s, a, e in zip(report.steps, report.accuracy, smooth)]
    with _output(args.out) as fh:
        write_csv(fh, ["step", "selected", "accuracy", "accuracy_ewma"], rows)


def build_parser():
    parser = argparse.ArgumentParser(prog="taskmodel", description="Probabilistic task modelling workbench.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", type=int, default=100)
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--themes", type=int, default=3)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--width", type=int, default=None, help="data width P (default: dim)")
    p.add_argument("--separation", type=float, default=6.0, help="neighbouring mean gap in units of sigma")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=1.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a task model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="flat YAML file of training options")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hidden", type=int, nargs="+", default=None)
    for name, kind in _TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("represent", help="per-task Dirichlet parameters and entropy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--split", action="store_true", help="use only each task's train half")
    p.set_defaults(func=_cmd_represent)

    p = sub.add_parser("distance", help="pairwise KL distance matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--log", action="store_true", help="export ln(1e-12 + d)")
    p.set_defaults(func=_cmd_distance)

    for name, func, help_text in (("select", _cmd_select, "order pool tasks by a selection policy"),
                                  ("simulate", _cmd_simulate, "lifelong task-selection run")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--pool", required=True)
        p.add_argument("--policy", choices=POLICIES, required=True)
        p.add_argument("--reference", default=None, help="corpus of test tasks for kl-min")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)
        p.set_defaults(func=func)
        if name == "select":
            p.add_argument("--count", type=int, default=1)
        else:
            p.add_argument("--eval", required=True, help="corpus of evaluation tasks")
            p.add_argument("--steps", type=int, default=100)
            p.add_argument("--pool-size", type=int, default=200)
            p.add_argument("--eval-every", type=int, default=1)
            p.add_argument("--ewma", type=float, default=0.98)
            p.add_argument("--embed-dim", type=int, default=8)
            p.add_argument("--hidden", type=int, nargs="+", default=[32])
            p.add_argument("--lr", type=float, default=1e-2)
    return parser


def main(argv=None):
    level = os.environ.get(LOG_ENV, "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (TaskModelError, OSError) as exc:
        print(f"taskmodel {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
