"""Dense encoder/decoder networks with hand-derived gradients.

Layers are affine maps ``x @ W + b`` with a leaky-linear activation (slope
0.01) between consecutive layers and none after the last. Parameters are kept
as a flat tuple ``(W0, b0, W1, b1, ...)`` so optimiser code can treat every
network alike.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from taskmodel.errors import UsageError
from taskmodel.themes import EmbeddingPosterior

__all__ = [
    "DenseNetwork",
    "ForwardCache",
    "AdamState",
    "EmbeddingSample",
    "init_network",
    "encode",
    "encode_with_cache",
    "decode_with_cache",
    "decoder_lambda",
    "sample_embedding",
    "cb_log_norm",
    "cb_log_norm_grad",
    "cb_log_likelihood",
    "cb_log_likelihood_grad",
    "prototypical_loss",
    "prototypical_loss_grad",
    "prototypes",
    "adam_init",
    "adam_step",
    "LEAKY_SLOPE",
    "LAMBDA_CLIP",
]

LEAKY_SLOPE = 0.01
LAMBDA_CLIP = 1e-6
_TAYLOR_HALF_WIDTH = 1e-3
_LOG2 = math.log(2.0)
# ln(artanh(t)/t) = t^2/3 + 13 t^4/90 + 251 t^6/2835 + 3551 t^8/56700 + ...
_CB_TAYLOR = (1.0 / 3.0, 13.0 / 90.0, 251.0 / 2835.0, 3551.0 / 56700.0)


@dataclass(frozen=True, eq=False)
class DenseNetwork:
    """Fully connected network; ``params`` alternates weights and biases."""

    params: tuple

    def __post_init__(self):
        params = tuple(np.asarray(p, dtype=np.float64) for p in self.params)
        if len(params) % 2 or not params:
            raise UsageError("params must alternate weight matrices and bias vectors")
        for i in range(0, len(params), 2):
            w, b = params[i], params[i + 1]
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise UsageError(f"layer {i // 2}: weight {w.shape} incompatible with bias {b.shape}")
            if i and params[i - 2].shape[1] != w.shape[0]:
                raise UsageError(f"layer {i // 2} input width does not match previous output")
        if not all(np.all(np.isfinite(p)) for p in params):
            raise UsageError("non-finite network parameters")
        object.__setattr__(self, "params", params)

    @property
    def widths(self):
        ws = [self.params[0].shape[0]]
        ws.extend(self.params[i].shape[1] for i in range(0, len(self.params), 2))
        return tuple(ws)

    @property
    def n_layers(self):
        return len(self.params) // 2

    def with_params(self, params):
        return DenseNetwork(tuple(params))

    def forward(self, x):
        """Return (output, cache) for a batch ``x`` of shape (N, input width)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.widths[0]:
            raise UsageError(f"input width {x.shape[1]} != network input width {self.widths[0]}")
        inputs, pre = [], []
        h = x
        for layer in range(self.n_layers):
            w, b = self.params[2 * layer], self.params[2 * layer + 1]
            inputs.append(h)
            z = h @ w + b
            pre.append(z)
            h = np.where(z > 0, z, LEAKY_SLOPE * z) if layer < self.n_layers - 1 else z
        return h, ForwardCache(tuple(inputs), tuple(pre))

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Reverse-mode pass: gradients for every parameter and for the input."""
        if cache is None:
            raise UsageError("backward needs the cache of a forward pass")
        grads = [None] * len(self.params)
        g = np.atleast_2d(grad_out)
        for layer in reversed(range(self.n_layers)):
            if layer < self.n_layers - 1:
                g = g * np.where(cache.pre[layer] > 0, 1.0, LEAKY_SLOPE)
            grads[2 * layer] = cache.inputs[layer].T @ g
            grads[2 * layer + 1] = g.sum(axis=0)
            g = g @ self.params[2 * layer].T
        return tuple(grads), g


@dataclass(frozen=True, eq=False)
class ForwardCache:
    inputs: tuple
    pre: tuple


def init_network(widths, rng, scale=1.0):
    """He-style normal initialisation for the given layer widths."""
    if len(widths) < 2:
        raise UsageError("a network needs at least an input and an output width")
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        params.append(scale * rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
        params.append(np.zeros(fan_out))
    return DenseNetwork(tuple(params))


def encode_with_cache(x, phi):
    """Encoder pass: (EmbeddingPosterior, log-variance, cache).

    The first D outputs are the means, the last D are log-variances and
    s = exp(logvar / 2).
    """
    out, cache = phi.forward(x)
    if out.shape[1] % 2:
        raise UsageError("encoder output width must be even (2D)")
    d = out.shape[1] // 2
    logvar = out[:, d:]
    return EmbeddingPosterior(out[:, :d], np.exp(0.5 * logvar)), logvar, cache


def encode(x, phi):
    return encode_with_cache(x, phi)[0]


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def decode_with_cache(u, theta):
    """Decoder pass: (lambda, raw output, cache); lambda is squashed into (0, 1)."""
    out, cache = theta.forward(u)
    lam = np.clip(_sigmoid(out), LAMBDA_CLIP, 1.0 - LAMBDA_CLIP)
    return lam, out, cache


def decoder_lambda(u, theta):
    return decode_with_cache(u, theta)[0]


@dataclass(frozen=True, eq=False)
class EmbeddingSample:
    u: np.ndarray
    noise: np.ndarray


def sample_embedding(post, noise):
    """Reparameterised sample u = m + s * noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != post.m.shape:
        raise UsageError(f"noise shape {noise.shape} != posterior shape {post.m.shape}")
    if not np.all(np.isfinite(noise)):
        raise UsageError("noise must be finite")
    return EmbeddingSample(post.m + post.s * noise, noise)


def _check_lambda(lam):
    lam = np.asarray(lam, dtype=np.float64)
    if not np.all((lam > 0.0) & (lam < 1.0)):
        raise UsageError("lambda must lie strictly inside (0, 1)")
    return lam


def cb_log_norm(lam):
    """ln C(lambda), the log normaliser of the continuous Bernoulli."""
    lam = _check_lambda(lam)
    t = 1.0 - 2.0 * lam
    near = np.abs(t) < 2.0 * _TAYLOR_HALF_WIDTH
    t_safe = np.where(near, 0.5, t)
    exact = np.log(2.0 * np.arctanh(t_safe) / t_safe)
    t2 = t * t
    series = t2 * (_CB_TAYLOR[0] + t2 * (_CB_TAYLOR[1] + t2 * (_CB_TAYLOR[2] + t2 * _CB_TAYLOR[3])))
    return np.where(near, _LOG2 + series, exact)


def cb_log_norm_grad(lam):
    """d ln C / d lambda."""
    lam = _check_lambda(lam)
    t = 1.0 - 2.0 * lam
    near = np.abs(t) < 2.0 * _TAYLOR_HALF_WIDTH
    t_safe = np.where(near, 0.5, t)
    exact_dt = 1.0 / ((1.0 - t_safe**2) * np.arctanh(t_safe)) - 1.0 / t_safe
    t2 = t * t
    series_dt = t * (
        2 * _CB_TAYLOR[0]
        + t2 * (4 * _CB_TAYLOR[1] + t2 * (6 * _CB_TAYLOR[2] + t2 * 8 * _CB_TAYLOR[3]))
    )
    return -2.0 * np.where(near, series_dt, exact_dt)


def _check_unit(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x >= 0.0) & (x <= 1.0)):
        raise UsageError("data must lie in [0, 1]")
    return x


def cb_log_likelihood(x, lam):
    """Continuous-Bernoulli log-likelihood summed over all entries."""
    x = _check_unit(x)
    lam = _check_lambda(lam)
    return float(np.sum(cb_log_norm(lam) + x * np.log(lam) + (1.0 - x) * np.log1p(-lam)))


def cb_log_likelihood_grad(x, lam):
    """Elementwise derivative of `cb_log_likelihood` with respect to lambda."""
    x = _check_unit(x)
    lam = _check_lambda(lam)
    return cb_log_norm_grad(lam) + x / lam - (1.0 - x) / (1.0 - lam)


def prototypes(train_u, train_y):
    """Per-class means; returns (classes, prototype matrix)."""
    train_u = np.atleast_2d(train_u)
    train_y = np.asarray(train_y)
    classes = np.unique(train_y)
    protos = np.stack([train_u[train_y == c].mean(axis=0) for c in classes])
    return classes, protos


def _proto_logits(train_u, train_y, val_u, val_y):
    classes, protos = prototypes(train_u, train_y)
    val_y = np.asarray(val_y)
    missing = np.setdiff1d(val_y, classes)
    if missing.size:
        raise UsageError(f"validation labels {missing.tolist()} have no training exemplar")
    target = np.searchsorted(classes, val_y)
    diff = np.atleast_2d(val_u)[:, None, :] - protos[None, :, :]
    logits = -np.sum(diff**2, axis=2)
    return classes, protos, target, diff, logits


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def prototypical_loss(train_u, train_y, val_u, val_y):
    """Mean cross-entropy of the softmax over negative squared distances to prototypes."""
    _, _, target, _, logits = _proto_logits(train_u, train_y, val_u, val_y)
    logp = _log_softmax(logits)
    return float(-np.mean(logp[np.arange(target.size), target]))


def prototypical_loss_grad(train_u, train_y, val_u, val_y):
    """Loss together with its gradients w.r.t. ``train_u`` and ``val_u``."""
    train_u = np.atleast_2d(train_u)
    train_y = np.asarray(train_y)
    classes, _, target, diff, logits = _proto_logits(train_u, train_y, val_u, val_y)
    n_val = target.size
    logp = _log_softmax(logits)
    loss = float(-np.mean(logp[np.arange(n_val), target]))
    dlogits = np.exp(logp)
    dlogits[np.arange(n_val), target] -= 1.0
    dlogits /= n_val
    # logits = -|v - p|^2: d/dv = -2 (v - p), d/dp = 2 (v - p)
    coeff = dlogits[:, :, None] * diff
    d_val = -2.0 * coeff.sum(axis=1)
    d_protos = 2.0 * coeff.sum(axis=0)
    idx = np.searchsorted(classes, train_y)
    counts = np.bincount(idx, minlength=classes.size).astype(np.float64)
    d_train = d_protos[idx] / counts[idx, None]
    return loss, d_train, d_val


@dataclass(frozen=True, eq=False)
class AdamState:
    """Bias-corrected Adam moments for one parameter tuple."""

    m: tuple
    v: tuple
    t: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    zeros = tuple(np.zeros_like(p) for p in params)
    return AdamState(zeros, zeros, 0, lr, beta1, beta2, eps)


def adam_step(params, grads, state):
    """One Adam step of gradient *ascent*; returns (new params, new state)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise UsageError("parameter, gradient and state lengths differ")
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or m.shape != p.shape:
            raise UsageError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_params.append(p + state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return tuple(new_params), replace(state, m=tuple(new_m), v=tuple(new_v), t=t)
