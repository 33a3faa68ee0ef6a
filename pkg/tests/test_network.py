import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

import oracles
from taskmodel.errors import UsageError
from taskmodel.network import (
    LEAKY_SLOPE,
    DenseNetwork,
    adam_init,
    adam_step,
    cb_log_likelihood,
    cb_log_likelihood_grad,
    cb_log_norm,
    cb_log_norm_grad,
    decoder_lambda,
    encode,
    init_network,
    prototypical_loss,
    prototypical_loss_grad,
    sample_embedding,
)
from taskmodel.themes import EmbeddingPosterior
from taskmodel.trainer import TaskDataset, TrainConfig, init_state, task_objective


def naive_forward(params, x):
    h = np.array(x, dtype=float)
    n_layers = len(params) // 2
    for layer in range(n_layers):
        w, b = params[2 * layer], params[2 * layer + 1]
        out = np.zeros((h.shape[0], w.shape[1]))
        for n in range(h.shape[0]):
            for j in range(w.shape[1]):
                z = b[j]
                for i in range(w.shape[0]):
                    z += h[n, i] * w[i, j]
                out[n, j] = z if layer == n_layers - 1 or z > 0 else LEAKY_SLOPE * z
        h = out
    return h


def cb_density(x, lam):
    return math.exp(cb_log_likelihood(np.array([x]), np.array([lam])))


class TestDenseNetwork:
    def test_widths(self):
        net = init_network((4, 6, 3), np.random.default_rng(0))
        assert net.widths == (4, 6, 3)
        assert net.n_layers == 2

    def test_incompatible_layers(self):
        with pytest.raises(UsageError):
            DenseNetwork((np.zeros((2, 3)), np.zeros(3), np.zeros((4, 1)), np.zeros(1)))

    def test_bias_shape(self):
        with pytest.raises(UsageError):
            DenseNetwork((np.zeros((2, 3)), np.zeros(2)))

    def test_non_finite(self):
        with pytest.raises(UsageError):
            DenseNetwork((np.full((2, 2), np.nan), np.zeros(2)))

    def test_naive_forward_oracle(self):
        rng = np.random.default_rng(1)
        net = init_network((5, 7, 4, 6), rng)
        x = rng.normal(size=(9, 5))
        np.testing.assert_allclose(net(x), naive_forward(net.params, x), rtol=1e-12, atol=1e-12)

    def test_width_mismatch(self):
        net = init_network((3, 2), np.random.default_rng(2))
        with pytest.raises(UsageError):
            net(np.zeros((1, 4)))

    def test_backward_requires_cache(self):
        net = init_network((3, 2), np.random.default_rng(3))
        with pytest.raises(UsageError):
            net.backward(None, np.zeros((1, 2)))

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        net = init_network((3, 4, 2), rng)
        x = rng.normal(size=(5, 3))
        weights = rng.normal(size=(5, 2))
        out, cache = net.forward(x)
        grads, gx = net.backward(cache, weights)
        h = 1e-6
        for pi, p in enumerate(net.params):
            for idx in np.ndindex(p.shape):
                plus = [q.copy() for q in net.params]
                plus[pi][idx] += h
                minus = [q.copy() for q in net.params]
                minus[pi][idx] -= h
                num = (np.sum(weights * net.with_params(plus)(x)) - np.sum(weights * net.with_params(minus)(x))) / (2 * h)
                assert grads[pi][idx] == pytest.approx(num, rel=1e-6, abs=1e-8)
        assert gx.shape == x.shape


class TestEncode:
    def test_zero_network(self):
        net = DenseNetwork((np.zeros((3, 4)), np.zeros(4)))
        post = encode(np.ones((2, 3)), net)
        np.testing.assert_array_equal(post.m, 0.0)
        np.testing.assert_array_equal(post.s, 1.0)

    def test_identity_layer(self):
        d = 3
        w = np.concatenate([np.eye(d), np.zeros((d, d))], axis=1)
        net = DenseNetwork((w, np.zeros(2 * d)))
        x = np.random.default_rng(5).normal(size=(4, d))
        post = encode(x, net)
        np.testing.assert_array_equal(post.m, x)
        np.testing.assert_array_equal(post.s, 1.0)

    def test_odd_output_width(self):
        net = DenseNetwork((np.zeros((3, 3)), np.zeros(3)))
        with pytest.raises(UsageError):
            encode(np.zeros((1, 3)), net)


class TestSampleEmbedding:
    def test_zero_noise(self):
        post = EmbeddingPosterior(np.array([[1.0, -2.0]]), np.array([[0.5, 3.0]]))
        np.testing.assert_array_equal(sample_embedding(post, np.zeros((1, 2))).u, post.m)

    def test_vanishing_scale(self):
        post = EmbeddingPosterior(np.array([[1.0, -2.0]]), np.full((1, 2), 1e-30))
        np.testing.assert_allclose(sample_embedding(post, np.array([[5.0, -5.0]])).u, post.m, atol=1e-20)

    def test_exact_reparameterisation(self):
        rng = np.random.default_rng(6)
        post = EmbeddingPosterior(rng.normal(size=(3, 2)), rng.uniform(0.1, 2, (3, 2)))
        noise = rng.normal(size=(3, 2))
        sample = sample_embedding(post, noise)
        np.testing.assert_array_equal(sample.u, post.m + post.s * noise)
        np.testing.assert_array_equal(sample.noise, noise)

    def test_monte_carlo_mean(self):
        rng = np.random.default_rng(7)
        m, s = np.array([0.3, -1.2]), np.array([0.5, 2.0])
        noise = rng.standard_normal((100_000, 2))
        u = sample_embedding(EmbeddingPosterior(np.tile(m, (100_000, 1)), np.tile(s, (100_000, 1))), noise).u
        assert np.all(np.abs(u.mean(axis=0) - m) < 4 * s / math.sqrt(100_000))

    def test_shape_and_finiteness(self):
        post = EmbeddingPosterior(np.zeros((2, 2)), np.ones((2, 2)))
        with pytest.raises(UsageError):
            sample_embedding(post, np.zeros((2, 3)))
        with pytest.raises(UsageError):
            sample_embedding(post, np.array([[np.inf, 0.0], [0.0, 0.0]]))


class TestContinuousBernoulli:
    def test_half_is_zero(self):
        x = np.random.default_rng(8).uniform(size=7)
        assert cb_log_likelihood(x, np.full(7, 0.5)) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("lam", [0.1, 0.3, 0.5, 0.7, 0.9, 0.4995, 1e-6, 0.999])
    def test_normalisation(self, lam):
        total, _ = integrate.quad(cb_density, 0.0, 1.0, args=(lam,), epsabs=1e-13, epsrel=1e-13)
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_taylor_branch_continuity(self):
        for eps in (1e-3, 1.0001e-3, 0.9999e-3):
            assert abs(cb_log_norm(0.5 + eps) - cb_log_norm(0.5 - eps)) < 1e-6
        inside, outside = cb_log_norm(0.5 + 0.999999e-3), cb_log_norm(0.5 + 1.000001e-3)
        assert abs(inside - outside) < 1e-6

    def test_taylor_branch_accuracy(self):
        # inside the switch the series must agree with the closed form evaluated in extended terms
        for lam in (0.5 + 5e-4, 0.5 - 9e-4):
            t = 1.0 - 2.0 * lam
            exact = math.log(2.0 * math.atanh(t) / t)
            assert float(cb_log_norm(lam)) == pytest.approx(exact, abs=1e-12)

    def test_symmetry(self):
        lam = np.linspace(0.01, 0.99, 41)
        np.testing.assert_allclose(cb_log_norm(lam), cb_log_norm(1.0 - lam), atol=1e-12)

    def test_norm_gradient(self):
        h = 1e-6
        for lam in (0.05, 0.3, 0.4999, 0.5, 0.5008, 0.62, 0.97):
            num = (cb_log_norm(lam + h) - cb_log_norm(lam - h)) / (2 * h)
            assert float(cb_log_norm_grad(lam)) == pytest.approx(float(num), rel=1e-6, abs=1e-6)

    def test_likelihood_gradient(self):
        rng = np.random.default_rng(9)
        x, lam = rng.uniform(size=5), rng.uniform(0.05, 0.95, size=5)
        grad = cb_log_likelihood_grad(x, lam)
        h = 1e-7
        for p in range(5):
            up, down = lam.copy(), lam.copy()
            up[p] += h
            down[p] -= h
            num = (cb_log_likelihood(x, up) - cb_log_likelihood(x, down)) / (2 * h)
            assert grad[p] == pytest.approx(num, rel=1e-6)

    @pytest.mark.parametrize("x, lam", [([1.5], [0.5]), ([-0.1], [0.5]), ([0.5], [0.0]), ([0.5], [1.0])])
    def test_domain(self, x, lam):
        with pytest.raises(UsageError):
            cb_log_likelihood(np.array(x), np.array(lam))

    def test_decoder_lambda_clipped(self):
        net = DenseNetwork((np.zeros((2, 3)), np.array([100.0, -100.0, 0.0])))
        lam = decoder_lambda(np.zeros((1, 2)), net)
        assert np.all((lam > 0) & (lam < 1))
        assert lam[0, 2] == 0.5


class TestPrototypicalLoss:
    def test_single_class(self):
        rng = np.random.default_rng(10)
        assert prototypical_loss(rng.normal(size=(3, 2)), [4, 4, 4], rng.normal(size=(2, 2)), [4, 4]) == 0.0

    def test_equidistant(self):
        train = np.array([[-1.0, 0.0], [1.0, 0.0]])
        assert prototypical_loss(train, [0, 1], np.array([[0.0, 3.0]]), [1]) == pytest.approx(math.log(2), abs=1e-15)

    @pytest.mark.parametrize("d", [0.5, 1.0, 3.0])
    def test_two_logit(self, d):
        train = np.array([[0.0], [d]])
        assert prototypical_loss(train, [0, 1], np.array([[0.0]]), [0]) == pytest.approx(math.log1p(math.exp(-d * d)), rel=1e-13)

    def test_missing_class(self):
        with pytest.raises(UsageError):
            prototypical_loss(np.zeros((2, 1)), [0, 0], np.zeros((1, 1)), [1])

    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        n_classes = rng.integers(1, 4)
        train_y = np.concatenate([np.arange(n_classes), rng.integers(0, n_classes, 4)])
        train = rng.normal(size=(train_y.size, 2))
        val_y = rng.integers(0, n_classes, 5)
        assert prototypical_loss(train, train_y, rng.normal(size=(5, 2)), val_y) >= 0.0

    def test_gradient(self):
        rng = np.random.default_rng(11)
        train_y = np.array([0, 1, 2, 0, 1])
        train, val = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
        val_y = np.array([2, 0, 1, 1])
        _, d_train, d_val = prototypical_loss_grad(train, train_y, val, val_y)
        h = 1e-6
        for arr, grad, is_train in ((train, d_train, True), (val, d_val, False)):
            for idx in np.ndindex(arr.shape):
                up, down = arr.copy(), arr.copy()
                up[idx] += h
                down[idx] -= h
                if is_train:
                    num = (prototypical_loss(up, train_y, val, val_y) - prototypical_loss(down, train_y, val, val_y)) / (2 * h)
                else:
                    num = (prototypical_loss(train, train_y, up, val_y) - prototypical_loss(train, train_y, down, val_y)) / (2 * h)
                assert grad[idx] == pytest.approx(num, rel=1e-6, abs=1e-9)


class TestAdam:
    def test_zero_gradient(self):
        params = (np.array([1.0, -2.0]), np.ones((2, 2)))
        state = adam_init(params)
        new, state2 = adam_step(params, tuple(np.zeros_like(p) for p in params), state)
        for a, b in zip(new, params):
            np.testing.assert_array_equal(a, b)
        assert state2.t == 1

    def test_hand_computed_first_step(self):
        params = (np.array([0.0, 1.0, 2.0]),)
        g = np.array([0.5, -3.0, 1e-12])
        new, state = adam_step(params, (g,), adam_init(params, lr=0.1))
        # t = 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
        expected = params[0] + 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(new[0], expected, rtol=1e-12)
        np.testing.assert_allclose(state.m[0], 0.1 * g)
        np.testing.assert_allclose(state.v[0], 0.001 * g * g)

    def test_hand_computed_second_step(self):
        params = (np.array([0.0]),)
        state = adam_init(params, lr=1.0)
        p1, state = adam_step(params, (np.array([1.0]),), state)
        p2, state = adam_step(p1, (np.array([2.0]),), state)
        m = 0.9 * 0.1 * 1.0 + 0.1 * 2.0
        v = 0.999 * 0.001 * 1.0 + 0.001 * 4.0
        step = (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert p2[0][0] == pytest.approx(p1[0][0] + step, rel=1e-12)

    def test_ascent_direction(self):
        params = (np.zeros(3),)
        new, _ = adam_step(params, (np.array([1.0, -1.0, 0.0]),), adam_init(params))
        assert new[0][0] > 0 > new[0][1]

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        params = (rng.normal(size=(3, 2)), rng.normal(size=2))
        grads = (rng.normal(size=(3, 2)), rng.normal(size=2))
        a = adam_step(params, grads, adam_init(params))
        b = adam_step(params, grads, adam_init(params))
        for x, y in zip(a[0], b[0]):
            np.testing.assert_array_equal(x, y)

    def test_shape_mismatch(self):
        params = (np.zeros(3),)
        with pytest.raises(UsageError):
            adam_step(params, (np.zeros(2),), adam_init(params))


class TestTaskGradients:
    def tiny(self, **weights):
        rng = np.random.default_rng(13)
        cfg = TrainConfig(n_themes=3, dim=2, hidden=(5,), tau0=1, **weights)
        x = rng.uniform(0.05, 0.95, (6, 4))
        task = TaskDataset.from_arrays(x, np.array([0, 1, 0, 0, 1, 1]))
        return cfg, task, init_state(cfg, 4, x, rng)

    def test_zero_weights_zero_gradients(self):
        cfg, task, state = self.tiny(w_lda=0.0, w_recon=0.0, w_cls=0.0, w_entropy=0.0)
        res = task_objective(task, state, np.random.default_rng(0), cfg)
        for g in res.encoder_grads + res.decoder_grads:
            np.testing.assert_array_equal(g, 0.0)

    def test_entropy_gradient_per_log_s(self):
        cfg, task, state = self.tiny(w_lda=0.0, w_recon=0.0, w_cls=0.0, w_entropy=1.0)
        # a single linear layer whose log-variance head is just its bias b: ln s = b / 2
        d = 2
        enc = DenseNetwork((np.zeros((4, 2 * d)), np.zeros(2 * d)))
        state = replace(state, encoder=enc)
        res = task_objective(task, state, np.random.default_rng(0), cfg)
        n_val = task.val_idx.size
        # d/d b = (d/d ln s) * (1/2) summed over the validation points
        np.testing.assert_allclose(res.encoder_grads[1][d:], 0.5 * n_val, rtol=1e-14)
        np.testing.assert_array_equal(res.encoder_grads[1][:d], 0.0)

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        assert oracles.finite_difference_errors(seed) < 1e-4
