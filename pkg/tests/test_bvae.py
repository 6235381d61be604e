import json
from dataclasses import replace

import numpy as np
import pytest

from entvae.bvae import (
    BetaVAE,
    BvaeConfig,
    CheckpointError,
    LatentParams,
    TrainingDiagnostic,
    build_model,
    kl_divergence,
    sample_latent,
)
from entvae.neuralnet import Mlp, grad_check, leaky_relu, softmax


def small_config(**kw):
    return BvaeConfig(**kw).scaled(8)


def naive_forward(model, x):
    """Layer-by-layer evaluation with explicit loops over the weight matrices."""
    def dense(layer, h):
        out = np.empty((h.shape[0], layer.weights.shape[1]))
        for j in range(layer.weights.shape[1]):
            out[:, j] = h @ layer.weights[:, j] + layer.biases[j]
        return out

    h = np.asarray(x, dtype=float)
    for layer in model.encoder:
        h = leaky_relu(dense(layer, h), layer.slope)
    mu, logvar = dense(model.mu_head, h), dense(model.logvar_head, h)
    h = mu
    for layer in model.decoder[:-1]:
        h = leaky_relu(dense(layer, h), layer.slope)
    return mu, logvar, softmax(dense(model.decoder[-1], h))


@pytest.fixture(scope="module")
def model():
    return build_model(small_config(), np.random.default_rng(0))


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(1)
    return rng.uniform(-1, 1, (6, 15)), np.array([0, 1, 1, 0, 1, 0])


class TestBuild:
    def test_full_shapes(self):
        m = BetaVAE(BvaeConfig())
        assert [l.weights.shape for l in m.encoder] == [(15, 512), (512, 256), (256, 128), (128, 64), (64, 32)]
        assert m.mu_head.weights.shape == m.logvar_head.weights.shape == (32, 2)
        assert [l.weights.shape for l in m.decoder] == [(2, 32), (32, 64), (64, 128), (128, 256), (256, 512), (512, 2)]

    def test_local_input_changes_first_layer_only(self):
        a, b = BetaVAE(BvaeConfig(input_dim=15)), BetaVAE(BvaeConfig(input_dim=6))
        assert b.encoder[0].weights.shape == (6, 512)
        assert [l.weights.shape for l in a.layers[1:]] == [l.weights.shape for l in b.layers[1:]]

    def test_deterministic(self):
        a = build_model(small_config(), np.random.default_rng(3))
        b = build_model(small_config(), np.random.default_rng(3))
        np.testing.assert_array_equal(a.buffer.flat, b.buffer.flat)

    def test_zero_biases(self, model):
        fresh = build_model(small_config(), np.random.default_rng(0))
        assert all(np.all(l.biases == 0) for l in fresh.layers)

    @pytest.mark.parametrize("kw", [{"input_dim": 14}, {"latent_dim": 3}, {"r_cat": 0}, {"beta": -1}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            BvaeConfig(**kw)


class TestForward:
    def test_zero_model(self, batch):
        m = BetaVAE(small_config())
        p = m.encode(batch[0])
        np.testing.assert_array_equal(p.mu, 0)
        np.testing.assert_array_equal(p.logvar, 0)
        np.testing.assert_array_equal(m.decode(np.random.default_rng(0).standard_normal((4, 2))), 0.5)

    def test_naive_oracle(self, model, batch):
        mu, logvar, probs = naive_forward(model, batch[0])
        params = model.encode(batch[0])
        np.testing.assert_allclose(params.mu, mu, atol=1e-10)
        np.testing.assert_allclose(params.logvar, logvar, atol=1e-10)
        np.testing.assert_allclose(model.decode(params.mu), probs, atol=1e-10)

    def test_batch_independence(self, model, batch):
        x = batch[0]
        whole = model.encode(x).mu
        # BLAS may block a 1-row product differently; agreement is to roundoff
        for i in range(len(x)):
            np.testing.assert_allclose(model.encode(x[i:i + 1]).mu[0], whole[i], rtol=0, atol=1e-14)

    def test_decode_rows_sum_to_one(self, model):
        p = model.decode(np.random.default_rng(2).standard_normal((50, 2)) * 10)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_latent_mean(self, model, batch):
        x = batch[0]
        np.testing.assert_array_equal(model.latent_mean(x), model.encode(x).mu)
        np.testing.assert_array_equal(model.latent_mean(x), model.latent_mean(x))
        perm = np.random.default_rng(3).permutation(len(x))
        np.testing.assert_array_equal(model.latent_mean(x[perm]), model.latent_mean(x)[perm])

    def test_shape_errors(self, model):
        with pytest.raises(ValueError):
            model.encode(np.zeros((2, 9)))
        with pytest.raises(ValueError):
            model.decode(np.zeros((2, 3)))


class TestLatent:
    def test_fixed_epsilon(self):
        s = sample_latent(LatentParams(np.zeros(2), np.zeros(2)), epsilon=np.array([1.0, -1.0]))
        np.testing.assert_array_equal(s.z, [1.0, -1.0])

    def test_vanishing_noise(self):
        mu = np.array([0.3, -0.7])
        s = sample_latent(LatentParams(mu, np.full(2, -60.0)), rng=np.random.default_rng(0))
        np.testing.assert_allclose(s.z, mu, atol=1e-12)

    def test_monte_carlo_moments(self):
        params = LatentParams(np.zeros((100_000, 2)), np.zeros((100_000, 2)))
        z = sample_latent(params, rng=np.random.default_rng(1)).z
        assert np.all(np.abs(z.mean(axis=0)) < 0.02)
        assert np.all(np.abs(z.var(axis=0) - 1) < 0.02)

    def test_needs_noise_source(self):
        with pytest.raises(ValueError):
            sample_latent(LatentParams(np.zeros(2), np.zeros(2)))

    def test_kl_values(self):
        assert kl_divergence(LatentParams(np.zeros(2), np.zeros(2))) == 0.0
        assert kl_divergence(LatentParams(np.array([1.0, 0.0]), np.zeros(2))) == pytest.approx(0.5)

    def test_kl_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p = LatentParams(rng.normal(0, 2, (3, 2)), rng.normal(0, 2, (3, 2)))
            assert kl_divergence(p) >= 0


class TestLoss:
    def test_beta_zero_is_scaled_ce(self, model, batch):
        x, y = batch
        eps = np.random.default_rng(4).standard_normal((len(y), 2))
        t = model.loss_total(x, y, r_cat=500, beta=0, epsilon=eps)
        assert t.total == pytest.approx(500 * t.cat, rel=1e-14)

    def test_weighted_sum(self, model, batch):
        x, y = batch
        eps = np.random.default_rng(5).standard_normal((len(y), 2))
        t = model.loss_total(x, y, r_cat=500, beta=1, epsilon=eps)
        assert t.total == pytest.approx(500 * t.cat + t.kl, rel=1e-14)

    def test_vanishing_at_perfect_prediction(self):
        m = BetaVAE(small_config())
        m.decoder[-1].biases[...] = [40.0, -40.0]
        x = np.zeros((3, 15))
        t = m.loss_total(x, np.zeros(3, dtype=int), epsilon=np.zeros((3, 2)))
        assert t.total <= 1e-9

    def test_bitwise_deterministic(self, model, batch):
        x, y = batch
        eps = np.random.default_rng(6).standard_normal((len(y), 2))
        a = model.loss_total(x, y, epsilon=eps, training=True, rng=np.random.default_rng(7))
        b = model.loss_total(x, y, epsilon=eps, training=True, rng=np.random.default_rng(7))
        assert a == b

    def test_nan_names_term(self, batch):
        m = build_model(small_config(), np.random.default_rng(8))
        m.logvar_head.biases[...] = 1e6
        with pytest.raises(TrainingDiagnostic, match="kl"):
            m.loss_total(batch[0], batch[1], epsilon=np.zeros((6, 2)))


class TestGradients:
    def test_reduced_clone(self, model, batch):
        x, y = batch
        eps = np.random.default_rng(9).standard_normal((len(y), 2))
        err = grad_check(model, x, y, loss_kwargs={"r_cat": 500.0, "beta": 1.0, "epsilon": eps})
        assert err < 1e-4

    def test_spot_check_full_model(self, batch):
        m = build_model(BvaeConfig(), np.random.default_rng(10))
        x, y = batch
        eps = np.random.default_rng(11).standard_normal((len(y), 2))
        rng = np.random.default_rng(12)
        indices = {k: rng.choice(p.size, size=min(p.size, 6), replace=False)
                   for k, p in enumerate(m.parameters())}
        err = grad_check(m, x, y, loss_kwargs={"epsilon": eps}, indices=indices)
        assert err < 1e-4

    def test_refuses_dropout(self, model, batch):
        with pytest.raises(ValueError):
            grad_check(model, *batch, loss_kwargs={"epsilon": np.zeros((6, 2)), "training": True})

    def test_beta_zero_logvar_path(self, model, batch):
        x, y = batch
        k = model.names.index("logvar")
        _, g = model.backward(x, y, beta=0.0, epsilon=np.zeros((6, 2)))
        np.testing.assert_array_equal(g[2 * k], 0.0)
        np.testing.assert_array_equal(g[2 * k + 1], 0.0)
        _, g = model.backward(x, y, beta=0.0, epsilon=np.ones((6, 2)))
        assert np.any(g[2 * k] != 0)

    def test_reduction_to_plain_classifier(self, batch):
        # slope 1 makes every hidden layer linear; with eps = 0 and beta = 0 the
        # model is the classifier x -> mu -> decoder, scaled by r_cat
        cfg = replace(small_config(), leaky_slope=1.0, dropout_rate=0.0)
        vae = build_model(cfg, np.random.default_rng(13))
        widths = [15, *cfg.encoder_widths, 2, *cfg.decoder_widths, 2]
        mlp = Mlp(widths, np.random.default_rng(0), slope=1.0)
        src = vae.encoder + [vae.mu_head] + vae.decoder
        for dst, layer in zip(mlp.layers, src):
            dst.weights[...] = layer.weights
            dst.biases[...] = layer.biases
        x, y = batch
        _, gv = vae.backward(x, y, r_cat=500.0, beta=0.0, epsilon=np.zeros((6, 2)))
        _, gm = mlp.loss_and_grads(x, y)
        vae_grads = [gv[2 * vae.names.index(n) + j] for n in
                     [*(f"enc{i}" for i in range(5)), "mu", *(f"dec{i}" for i in range(5)), "out"]
                     for j in (0, 1)]
        for a, b in zip(vae_grads, gm):
            np.testing.assert_allclose(a, 500.0 * b, rtol=1e-10, atol=1e-12)

    def test_common_scaling(self, model, batch):
        x, y = batch
        eps = np.random.default_rng(14).standard_normal((6, 2))
        t1, g1 = model.backward(x, y, r_cat=500.0, beta=1.0, epsilon=eps)
        g1 = [g.copy() for g in g1]
        t3, g3 = model.backward(x, y, r_cat=1500.0, beta=3.0, epsilon=eps)
        assert t3.total == pytest.approx(3 * t1.total, rel=1e-12)
        for a, b in zip(g1, g3):
            np.testing.assert_allclose(b, 3 * a, rtol=1e-12, atol=1e-15)


class TestCheckpoint:
    def test_round_trip(self, model, tmp_path, batch):
        path = tmp_path / "m.json"
        model.save(path)
        back = BetaVAE.load(path)
        assert back.config == model.config
        np.testing.assert_array_equal(back.buffer.flat, model.buffer.flat)
        np.testing.assert_array_equal(back.predict(batch[0]), model.predict(batch[0]))

    def test_bad_shape_named(self, model):
        doc = model.to_dict()
        doc["layers"][2]["weights"] = doc["layers"][2]["weights"][:-1]
        with pytest.raises(CheckpointError, match="enc2"):
            BetaVAE.from_dict(doc)

    def test_bad_version(self, model):
        doc = model.to_dict()
        doc["format_version"] = 99
        with pytest.raises(CheckpointError):
            BetaVAE.from_dict(doc)

    def test_non_finite(self, model):
        doc = json.loads(json.dumps(model.to_dict()))
        doc["layers"][0]["biases"][0] = float("nan")
        with pytest.raises(CheckpointError, match="non-finite"):
            BetaVAE.from_dict(doc)

    def test_not_json(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text("{oops")
        with pytest.raises(CheckpointError):
            BetaVAE.load(path)
