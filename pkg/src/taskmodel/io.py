"""File formats: corpora and checkpoints, plus configuration loading and CSV export.

Binary corpus layout (all integers little-endian):

    magic      8 bytes   b"TMCORPUS"
    version    u32       currently 1
    width P    u32
    n_labels   u32       labels lie in [0, n_labels)
    n_tasks    u32
    then per task:
      N        u32
      points   N*P f64   row-major
      labels   N   i32
      split    N   u8    1 for train half, 0 for validation half

The JSON-lines alternative (suffix ``.jsonl``) has a header object on the
first line, {"format": "taskmodel-corpus", "version": 1, "width": P,
"n_labels": L}, followed by one {"points": [[...]], "labels": [...],
"train": [...]} object per task, where "train" lists the train-half indices.

Checkpoint layout: magic b"TMCHKPT\\0", u32 version, 32-byte SHA-256 of the
payload, u64 payload length, then the payload, an ``.npz`` archive holding
the arrays and a JSON metadata record.
"""

import csv
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from taskmodel.errors import CheckpointError, ConfigError, ParseError, TaskModelError
from taskmodel.network import AdamState, DenseNetwork
from taskmodel.themes import TaskTheme, ThemeSet
from taskmodel.trainer import ModelState, TaskDataset, TrainConfig

__all__ = [
    "Corpus",
    "CORPUS_VERSION",
    "CHECKPOINT_VERSION",
    "save_corpus",
    "load_corpus",
    "save_checkpoint",
    "load_checkpoint",
    "check_compatible",
    "load_config",
    "format_float",
    "write_csv",
]

CORPUS_MAGIC = b"TMCORPUS"
CORPUS_VERSION = 1
CHECKPOINT_MAGIC = b"TMCHKPT\0"
CHECKPOINT_VERSION = 1
_CORPUS_HEADER = struct.Struct("<8sIIII")
_CHECKPOINT_HEADER = struct.Struct("<8sI32sQ")
_U32 = struct.Struct("<I")


@dataclass(frozen=True, eq=False)
class Corpus:
    """A set of tasks sharing the data width and the label alphabet."""

    tasks: tuple
    n_labels: int
    version: int = CORPUS_VERSION

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        _validate(self.tasks, self.n_labels)

    @property
    def width(self):
        return self.tasks[0].width

    def __len__(self):
        return len(self.tasks)


def _validate(tasks, n_labels):
    if not tasks:
        raise ParseError("corpus contains no tasks")
    width = tasks[0].width
    for i, task in enumerate(tasks):
        if task.width != width:
            raise ParseError(f"task {i}: width {task.width} differs from {width}")
        if np.any(task.labels < 0) or np.any(task.labels >= n_labels):
            raise ParseError(f"task {i}: label outside [0, {n_labels})")


def _make_task(i, points, labels, train):
    if not np.all(np.isfinite(points)):
        raise ParseError(f"task {i}: non-finite feature value")
    if np.any(points < 0.0) or np.any(points > 1.0):
        raise ParseError(f"task {i}: feature value outside range [0,1]")
    try:
        return TaskDataset.from_arrays(points, labels, np.flatnonzero(train))
    except TaskModelError as exc:
        raise ParseError(f"task {i}: {exc}") from exc


def _train_mask(task):
    mask = np.zeros(task.n_points, dtype=np.uint8)
    mask[task.train_idx] = 1
    return mask


def _is_jsonl(path):
    return Path(path).suffix.lower() in (".jsonl", ".json")


def save_corpus(path, corpus):
    """Write a corpus; the format follows the file suffix (``.jsonl`` or binary)."""
    if not isinstance(corpus, Corpus):
        raise TypeError("save_corpus expects a Corpus")
    if _is_jsonl(path):
        header = {"format": "taskmodel-corpus", "version": corpus.version,
                  "width": corpus.width, "n_labels": corpus.n_labels}
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for task in corpus.tasks:
                record = {"points": task.points.tolist(), "labels": task.labels.tolist(),
                          "train": task.train_idx.tolist()}
                fh.write(json.dumps(record) + "\n")
        return
    with open(path, "wb") as fh:
        fh.write(_CORPUS_HEADER.pack(CORPUS_MAGIC, corpus.version, corpus.width,
                                     corpus.n_labels, len(corpus.tasks)))
        for task in corpus.tasks:
            fh.write(_U32.pack(task.n_points))
            fh.write(task.points.astype("<f8").tobytes())
            fh.write(task.labels.astype("<i4").tobytes())
            fh.write(_train_mask(task).tobytes())


def load_corpus(path):
    """Read and validate a corpus written by `save_corpus` (or by hand as JSON lines)."""
    if _is_jsonl(path):
        return _load_jsonl(path)
    data = Path(path).read_bytes()
    if len(data) < _CORPUS_HEADER.size:
        raise ParseError("file too short for a corpus header")
    magic, version, width, n_labels, n_tasks = _CORPUS_HEADER.unpack_from(data)
    if magic != CORPUS_MAGIC:
        raise ParseError("not a corpus file (bad magic bytes)")
    if version != CORPUS_VERSION:
        raise ParseError(f"unsupported corpus version {version}")
    if n_tasks == 0:
        raise ParseError("corpus contains no tasks")
    offset = _CORPUS_HEADER.size
    tasks = []
    for i in range(n_tasks):
        if offset + 4 > len(data):
            raise ParseError(f"task {i}: truncated record")
        (n,) = _U32.unpack_from(data, offset)
        offset += 4
        size = n * width * 8 + n * 4 + n
        if offset + size > len(data):
            raise ParseError(f"task {i}: truncated record")
        points = np.frombuffer(data, "<f8", n * width, offset).reshape(n, width).astype(np.float64)
        offset += n * width * 8
        labels = np.frombuffer(data, "<i4", n, offset).astype(np.int64)
        offset += n * 4
        train = np.frombuffer(data, np.uint8, n, offset)
        offset += n
        if np.any(train > 1):
            raise ParseError(f"task {i}: split flags must be 0 or 1")
        tasks.append(_make_task(i, points, labels, train))
    if offset != len(data):
        raise ParseError(f"{len(data) - offset} trailing bytes after task {n_tasks - 1}")
    return _corpus(tasks, n_labels, version)


def _corpus(tasks, n_labels, version):
    try:
        return Corpus(tuple(tasks), n_labels, version)
    except ParseError:
        raise
    except TaskModelError as exc:
        raise ParseError(str(exc)) from exc


def _load_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ParseError("empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != "taskmodel-corpus":
        raise ParseError("first line is not a corpus header")
    if header.get("version") != CORPUS_VERSION:
        raise ParseError(f"unsupported corpus version {header.get('version')}")
    width, n_labels = header.get("width"), header.get("n_labels")
    if not isinstance(width, int) or not isinstance(n_labels, int) or width < 1 or n_labels < 1:
        raise ParseError("header needs positive integer width and n_labels")
    tasks = []
    for i, line in enumerate(lines[1:]):
        try:
            rec = json.loads(line)
            points = np.asarray(rec["points"], dtype=np.float64)
            labels = np.asarray(rec["labels"])
            train_idx = np.asarray(rec["train"], dtype=np.int64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"task {i}: malformed record ({exc})") from exc
        if points.ndim != 2 or points.shape[1] != width:
            raise ParseError(f"task {i}: points must be an N x {width} array")
        if labels.shape != (points.shape[0],) or not np.issubdtype(labels.dtype, np.integer):
            raise ParseError(f"task {i}: need one integer label per point")
        if np.any((train_idx < 0) | (train_idx >= points.shape[0])) or np.unique(train_idx).size != train_idx.size:
            raise ParseError(f"task {i}: invalid train indices")
        train = np.zeros(points.shape[0], dtype=np.uint8)
        train[train_idx] = 1
        tasks.append(_make_task(i, points, labels.astype(np.int64), train))
    return _corpus(tasks, n_labels, header["version"])


def _network_arrays(prefix, net, adam, arrays):
    if net is None:
        return
    for i, p in enumerate(net.params):
        arrays[f"{prefix}_param_{i}"] = p
    for i, (m, v) in enumerate(zip(adam.m, adam.v)):
        arrays[f"{prefix}_adam_m_{i}"] = m
        arrays[f"{prefix}_adam_v_{i}"] = v


def _adam_meta(adam):
    if adam is None:
        return None
    return {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}


def save_checkpoint(path, state, cfg=None):
    """Write the full model state (and optionally its training config)."""
    arrays = {
        "means": np.stack([t.mean for t in state.themes.themes]),
        "covs": np.stack([t.cov for t in state.themes.themes]),
        "alpha": state.themes.alpha,
    }
    _network_arrays("encoder", state.encoder, state.encoder_adam, arrays)
    _network_arrays("decoder", state.decoder, state.decoder_adam, arrays)
    meta = {
        "n_themes": state.themes.n_themes,
        "dim": state.dim,
        "data_width": state.data_width,
        "step": state.step,
        "codec": state.codec,
        "identity_s": state.identity_s,
        "encoder_layers": None if state.encoder is None else len(state.encoder.params),
        "decoder_layers": None if state.decoder is None else len(state.decoder.params),
        "encoder_adam": _adam_meta(state.encoder_adam),
        "decoder_adam": _adam_meta(state.decoder_adam),
        "config": None if cfg is None else cfg.to_dict(),
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, digest, len(payload)))
        fh.write(payload)


def _load_network(prefix, n_params, adam_meta, arrays):
    if n_params is None:
        return None, None
    params = tuple(arrays[f"{prefix}_param_{i}"] for i in range(n_params))
    net = DenseNetwork(params)
    adam = AdamState(
        m=tuple(arrays[f"{prefix}_adam_m_{i}"] for i in range(n_params)),
        v=tuple(arrays[f"{prefix}_adam_v_{i}"] for i in range(n_params)),
        **adam_meta,
    )
    return net, adam


def load_checkpoint(path, expected_themes=None):
    """Read a checkpoint; returns (ModelState, TrainConfig or None).

    Theme factorisations are recomputed from the stored covariances and
    checked against them. ``expected_themes`` guards against loading a model
    with a different K.
    """
    data = Path(path).read_bytes()
    if len(data) < _CHECKPOINT_HEADER.size:
        raise CheckpointError("checksum error: file truncated before the header ends")
    magic, version, digest, length = _CHECKPOINT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    payload = data[_CHECKPOINT_HEADER.size:]
    if len(payload) != length or hashlib.sha256(payload).digest() != digest:
        raise CheckpointError("checksum error: payload is truncated or corrupted")
    with np.load(io.BytesIO(payload), allow_pickle=False) as npz:
        arrays = {name: npz[name] for name in npz.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
    means, covs, alpha = arrays["means"], arrays["covs"], arrays["alpha"]
    k, d = meta["n_themes"], meta["dim"]
    if means.shape != (k, d) or covs.shape != (k, d, d) or alpha.shape != (k,):
        raise CheckpointError("stored arrays are inconsistent with K and D")
    if expected_themes is not None and expected_themes != k:
        raise CheckpointError(f"incompatible checkpoint: it has K={k}, expected K={expected_themes}")
    themes = []
    for j in range(k):
        theme = TaskTheme.from_moments(means[j], covs[j])
        if not np.array_equal(theme.cov, covs[j]):
            raise CheckpointError(f"theme {j}: stored covariance is not positive definite")
        themes.append(theme)
    encoder, enc_adam = _load_network("encoder", meta["encoder_layers"], meta["encoder_adam"], arrays)
    decoder, dec_adam = _load_network("decoder", meta["decoder_layers"], meta["decoder_adam"], arrays)
    state = ModelState(
        themes=ThemeSet(tuple(themes), alpha),
        encoder=encoder,
        decoder=decoder,
        encoder_adam=enc_adam,
        decoder_adam=dec_adam,
        step=meta["step"],
        data_width=meta["data_width"],
        codec=meta["codec"],
        identity_s=meta["identity_s"],
    )
    cfg = None if meta["config"] is None else TrainConfig.from_dict(meta["config"])
    return state, cfg


def check_compatible(state, cfg, data_width=None):
    """Raise CheckpointError if a loaded state cannot continue under ``cfg``."""
    if state.themes.n_themes != cfg.n_themes:
        raise CheckpointError(f"incompatible checkpoint: K={state.themes.n_themes}, config has K={cfg.n_themes}")
    if state.dim != cfg.dim:
        raise CheckpointError(f"incompatible checkpoint: D={state.dim}, config has D={cfg.dim}")
    if state.codec != cfg.codec:
        raise CheckpointError(f"incompatible checkpoint: codec {state.codec!r}, config has {cfg.codec!r}")
    if data_width is not None and state.codec == "network" and state.data_width != data_width:
        raise CheckpointError(f"incompatible checkpoint: data width {state.data_width}, corpus has {data_width}")


def load_config(path):
    """Flat key/value YAML mapping of TrainConfig fields."""
    with open(path, encoding="utf-8") as fh:
        try:
            values = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if values is None:
        return {}
    if not isinstance(values, dict):
        raise ConfigError("configuration file must hold a mapping")
    for key, value in values.items():
        if isinstance(value, dict):
            raise ConfigError(f"configuration key {key!r} is nested; use a flat mapping")
    unknown = set(values) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
    return values


def format_float(x):
    """Locale-independent 17-significant-digit text."""
    return "%.17g" % float(x)


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format_float(value)
    return str(value)


def write_csv(stream, header, rows):
    """Write a header line and rows; floats use 17 significant digits."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
