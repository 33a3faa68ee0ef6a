"""Independent reference implementations used by the tests.

Everything here is written as plain loops with dense matrix inverses and
scipy's special functions, so that it shares no code path with the package.
"""

import math

import numpy as np
from scipy.special import digamma, gammaln, polygamma
from scipy.stats import dirichlet


def expected_loglik(m, s, mean, cov):
    d = len(m)
    inv = np.linalg.inv(cov)
    quad = 0.0
    for a in range(d):
        for b in range(d):
            quad += (m[a] - mean[a]) * inv[a, b] * (m[b] - mean[b])
    trace = 0.0
    for a in range(d):
        trace += inv[a, a] * s[a] ** 2
    return -0.5 * (d * math.log(2 * math.pi) + math.log(np.linalg.det(cov)) + quad + trace)


def responsibilities(m, s, means, covs, gamma):
    n, k = len(m), len(means)
    total = sum(gamma)
    out = np.zeros((n, k))
    for i in range(n):
        logits = [expected_loglik(m[i], s[i], means[j], covs[j]) + digamma(gamma[j]) - digamma(total)
                  for j in range(k)]
        top = max(logits)
        weights = [math.exp(v - top) for v in logits]
        z = sum(weights)
        for j in range(k):
            out[i, j] = weights[j] / z
    return out


def gamma_update(alpha, r):
    out = list(alpha)
    for row in r:
        for j in range(len(alpha)):
            out[j] += row[j]
    return np.array(out)


def local_moments(tasks):
    """tasks: list of (m, s, r) arrays. Returns (n_k, means, covs) by triple loops."""
    k = tasks[0][2].shape[1]
    d = tasks[0][0].shape[1]
    n_k = np.zeros(k)
    means = np.zeros((k, d))
    for m, _, r in tasks:
        for i in range(len(m)):
            for j in range(k):
                n_k[j] += r[i, j]
                for a in range(d):
                    means[j, a] += r[i, j] * m[i, a]
    for j in range(k):
        means[j] /= n_k[j]
    covs = np.zeros((k, d, d))
    for m, s, r in tasks:
        for i in range(len(m)):
            for j in range(k):
                for a in range(d):
                    for b in range(d):
                        term = (m[i, a] - means[j, a]) * (m[i, b] - means[j, b])
                        if a == b:
                            term += s[i, a] ** 2
                        covs[j, a, b] += r[i, j] * term
    for j in range(k):
        covs[j] /= n_k[j]
    return n_k, means, covs


def newton_step(alpha, gammas):
    """Dense solve H^-1 g with H = diag(q) + a 11^T assembled explicitly."""
    alpha = np.asarray(alpha, float)
    t = len(gammas)
    k = len(alpha)
    g = np.zeros(k)
    for j in range(k):
        g[j] = t * (digamma(alpha.sum()) - digamma(alpha[j]))
        for gam in gammas:
            g[j] += digamma(gam[j]) - digamma(np.sum(gam))
    h = np.full((k, k), t * float(polygamma(1, alpha.sum())))
    for j in range(k):
        h[j, j] -= t * float(polygamma(1, alpha[j]))
    return np.linalg.solve(h, g), g


def elbo_terms(m, s, means, covs, alpha, gamma, r):
    n, k = r.shape
    e_log_pi = [digamma(gamma[j]) - digamma(sum(gamma)) for j in range(k)]
    a1 = sum(r[i, j] * expected_loglik(m[i], s[i], means[j], covs[j]) for i in range(n) for j in range(k))
    a2 = sum(r[i, j] * e_log_pi[j] for i in range(n) for j in range(k))
    a3 = gammaln(sum(alpha)) - sum(gammaln(a) for a in alpha) + sum((alpha[j] - 1) * e_log_pi[j] for j in range(k))
    a4 = sum(r[i, j] * math.log(r[i, j]) for i in range(n) for j in range(k) if r[i, j] > 0)
    a5 = gammaln(sum(gamma)) - sum(gammaln(gamma[j]) - (gamma[j] - 1) * e_log_pi[j] for j in range(k))
    return a1, a2, a3, a4, a5


def monte_carlo_elbo(m, s, means, covs, alpha, gamma, r, n_samples, rng, chunk=200_000):
    """Sample u ~ q(u), z ~ r, pi ~ Dir(gamma); return (mean, standard error) of
    ln p(u, z, pi) - ln q(z, pi)."""
    n, k = r.shape
    d = m.shape[1]
    invs = [np.linalg.inv(c) for c in covs]
    logdets = [math.log(np.linalg.det(c)) for c in covs]
    total, total_sq, done = 0.0, 0.0, 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        pi = rng.dirichlet(gamma, size=b)
        pi = np.clip(pi, 1e-300, None)
        val = dirichlet.logpdf(pi.T / pi.sum(axis=1), alpha) - dirichlet.logpdf(pi.T / pi.sum(axis=1), gamma)
        for i in range(n):
            cdf = np.cumsum(r[i])
            z = np.minimum(np.searchsorted(cdf, rng.random(b) * cdf[-1], side="right"), k - 1)
            u = m[i] + s[i] * rng.standard_normal((b, d))
            for j in range(k):
                sel = z == j
                if not np.any(sel):
                    continue
                diff = u[sel] - means[j]
                quad = np.einsum("na,ab,nb->n", diff, invs[j], diff)
                val[sel] += (-0.5 * (d * math.log(2 * math.pi) + logdets[j] + quad)
                             + np.log(pi[sel, j]) - math.log(r[i, j]))
        total += val.sum()
        total_sq += (val**2).sum()
        done += b
    mean = total / n_samples
    var = total_sq / n_samples - mean**2
    return mean, math.sqrt(var / n_samples)


def random_instance(rng, k, d, n, s_range=(0.05, 1.0)):
    means = rng.normal(scale=2.0, size=(k, d))
    covs = []
    for _ in range(k):
        a = rng.standard_normal((d, d))
        covs.append(a @ a.T + 0.3 * np.eye(d))
    m = rng.normal(scale=2.0, size=(n, d))
    s = rng.uniform(*s_range, size=(n, d))
    alpha = rng.uniform(0.3, 3.0, size=k)
    return m, s, means, np.array(covs), alpha


def finite_difference_errors(seed, h_rel=1e-4, floor=1e-8):
    """Worst relative error between the analytic encoder/decoder gradients of the
    per-task objective and central finite differences on a tiny network.

    The E-step output is frozen at its value for the unperturbed parameters and
    the reparameterisation noise is replayed, so the objective is a smooth
    deterministic function of the weights. ``floor`` guards the denominator of
    the relative error for gradients that vanish.
    """
    from dataclasses import replace

    from taskmodel.trainer import TaskDataset, TrainConfig, init_state, task_objective

    rng = np.random.default_rng(seed)
    cfg = TrainConfig(n_themes=3, dim=2, hidden=(5,), tau0=1)
    width, n = 4, 6
    x = rng.uniform(0.05, 0.95, (n, width))
    y = rng.integers(0, 2, n)
    y[:2], y[3:5] = [0, 1], [0, 1]
    task = TaskDataset.from_arrays(x, y)
    state = init_state(cfg, width, x, rng)
    res = task_objective(task, state, np.random.default_rng(99), cfg)
    frozen = (res.posterior.gamma, res.posterior.responsibilities)

    def objective(encoder, decoder):
        st = replace(state, encoder=encoder, decoder=decoder)
        return task_objective(task, st, np.random.default_rng(99), cfg, frozen=frozen).objective

    worst = 0.0
    for which, net, grads in (("enc", state.encoder, res.encoder_grads), ("dec", state.decoder, res.decoder_grads)):
        for pi, p in enumerate(net.params):
            for idx in np.ndindex(p.shape):
                h = h_rel * max(abs(p[idx]), 1.0)
                plus = [q.copy() for q in net.params]
                plus[pi][idx] += h
                minus = [q.copy() for q in net.params]
                minus[pi][idx] -= h
                a, b = net.with_params(plus), net.with_params(minus)
                if which == "enc":
                    num = (objective(a, state.decoder) - objective(b, state.decoder)) / (2 * h)
                else:
                    num = (objective(state.encoder, a) - objective(state.encoder, b)) / (2 * h)
                an = grads[pi][idx]
                worst = max(worst, abs(an - num) / max(abs(an), abs(num), floor))
    return worst
