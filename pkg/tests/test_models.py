import math

import numpy as np
import pytest
from conftest import fd_grad

from wvi import autodiff as ad
from wvi.autodiff import Parameter, Tape, Tensor
from wvi.models import (DenseNet, ModelPair, gaussian_row_logpdf, load_checkpoint,
                        save_checkpoint)


def small_pair(rng, dx=3, dz=2, **kwargs):
    return ModelPair.build(latent_dim=dz, observable_dim=dx, decoder_hidden=(4,),
                           encoder_hidden=(4,), rng=rng, **kwargs)


def loop_forward(net, x):
    """Neuron-by-neuron re-evaluation of a dense net."""
    h = [float(v) for v in x]
    last = len(net.weights) - 1
    for li, (w, b) in enumerate(zip(net.weights, net.biases)):
        nxt = []
        for j in range(w.data.shape[1]):
            acc = b.data[j]
            for i in range(w.data.shape[0]):
                acc += h[i] * w.data[i, j]
            if li != last and acc < 0:
                acc = 0.0
            nxt.append(acc)
        h = nxt
    return np.array(h)


class TestDenseNet:
    def test_zero_weight_net_outputs_bias(self):
        net = DenseNet([3, 2], rng=None, name="net")
        net.biases[0].data = np.array([1.5, -2.0])
        out = net.forward_array(np.ones((4, 3)))
        np.testing.assert_array_equal(out, np.tile([1.5, -2.0], (4, 1)))

    def test_identity_layer_passthrough(self):
        net = DenseNet([3, 3], rng=None, name="net")
        net.weights[0].data = np.eye(3)
        x = np.array([[0.1, -0.2, 0.3]])
        np.testing.assert_array_equal(net.forward_array(x), x)

    def test_forward_matches_loop_reference(self):
        rng = np.random.default_rng(0)
        net = DenseNet([3, 5, 2], rng=rng, name="net")
        x = rng.normal(size=3)
        np.testing.assert_allclose(net.forward_array(x[None])[0], loop_forward(net, x),
                                   rtol=1e-12)

    def test_tracked_forward_equals_array_forward(self):
        rng = np.random.default_rng(1)
        net = DenseNet([2, 6, 3], rng=rng, name="net")
        x = rng.normal(size=(5, 2))
        tape = Tape()
        np.testing.assert_array_equal(net.forward(Tensor(x), tape).data,
                                      net.forward_array(x))

    def test_input_shape_check(self):
        net = DenseNet([3, 2], rng=None, name="net")
        with pytest.raises(ad.ShapeError, match="net"):
            net.forward(Tensor(np.ones((2, 4))))

    def test_rejects_degenerate_sizes(self):
        with pytest.raises(ValueError):
            DenseNet([3], rng=None, name="net")


class TestSampling:
    def test_deterministic_generator_equals_decoder_mean(self):
        rng = np.random.default_rng(2)
        pair = small_pair(rng, obs_noise_sigma=0.0)
        batch = pair.sample_joint_p(6, np.random.default_rng(3))
        np.testing.assert_array_equal(batch.x.data,
                                      pair.decoder.forward_array(batch.z.data))
        assert batch.origin == "model_p"

    def test_prior_mean_within_clt_bound(self):
        pair = small_pair(np.random.default_rng(4))
        batch = pair.sample_joint_p(100000, np.random.default_rng(5))
        se = 1.0 / math.sqrt(batch.n)
        assert np.abs(batch.z.data.mean(axis=0)).max() <= 3 * se

    def test_fixed_seed_reproduces_batch(self):
        pair = small_pair(np.random.default_rng(6))
        a = pair.sample_joint_p(5, np.random.default_rng(42))
        b = pair.sample_joint_p(5, np.random.default_rng(42))
        np.testing.assert_array_equal(a.x.data, b.x.data)
        np.testing.assert_array_equal(a.z.data, b.z.data)

    def test_variational_sample_rows_come_from_dataset(self):
        rng = np.random.default_rng(7)
        pair = small_pair(rng)
        data = rng.uniform(size=(20, 3))
        batch = pair.sample_joint_q(8, data, np.random.default_rng(8))
        assert batch.origin == "variational_q"
        for row in batch.x.data:
            assert any((row == d).all() for d in data)

    def test_zero_latent_noise_equals_encoder_mean(self):
        rng = np.random.default_rng(9)
        pair = small_pair(rng, latent_noise_sigma=0.0)
        data = rng.uniform(size=(10, 3))
        batch = pair.sample_joint_q(4, data, np.random.default_rng(10))
        np.testing.assert_array_equal(batch.z.data,
                                      pair.encoder.forward_array(batch.x.data))

    def test_empty_dataset_rejected(self):
        pair = small_pair(np.random.default_rng(11))
        with pytest.raises(ValueError, match="non-empty"):
            pair.sample_joint_q(2, np.zeros((0, 3)), np.random.default_rng(0))

    def test_reparameterized_mean_gradient(self):
        # sample = mu + sigma * eta, so d mean(sample * c) / d mu == c exactly
        mu = Parameter(np.array([0.7]), "mu")
        c = 2.5
        rng = np.random.default_rng(12)
        eta = rng.standard_normal((64, 1))

        def loss_at(value):
            return float((value + 0.3 * eta).mean() * c)

        tape = Tape()
        leaf = tape.leaf_for(mu)
        sample = ad.reshape(leaf, (1, 1)) + 0.3 * Tensor(eta)
        grads = tape.backward(ad.reduce_mean(sample) * c)
        np.testing.assert_allclose(grads[mu], [c], rtol=1e-12)
        fd = fd_grad(lambda v: loss_at(v), np.array([0.7]))
        np.testing.assert_allclose(grads[mu], fd, rtol=1e-6)

    def test_purity_of_means(self):
        rng = np.random.default_rng(13)
        pair = small_pair(rng)
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(pair.encoder_mean(x).data,
                                      pair.encoder_mean(x).data)


class TestLogDensities:
    def test_both_residuals_zero_1d(self):
        # decoder maps z = 0 to exactly x, both sigmas 1: each factor is the
        # standard normal density at its mean
        decoder = DenseNet([1, 1], rng=None, name="decoder")
        decoder.biases[0].data = np.array([0.4])
        encoder = DenseNet([1, 1], rng=None, name="encoder")
        pair = ModelPair(decoder, encoder, obs_noise_sigma=1.0, latent_noise_sigma=1.0)
        from wvi.costs import JointBatch

        batch = JointBatch(x=Tensor([[0.4]]), z=Tensor([[0.0]]), origin="model_p")
        log_p, log_q = pair.log_densities(batch)
        assert float(log_p.data[0]) == pytest.approx(2 * math.log(1 / math.sqrt(2 * math.pi)))

    def test_standard_normal_at_zero(self):
        got = gaussian_row_logpdf(Tensor([[0.0]]), 0.0, 1.0)
        assert float(got.data[0]) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_batch_matches_scalar_loop(self):
        rng = np.random.default_rng(14)
        pair = small_pair(rng)
        from wvi.costs import JointBatch

        x = rng.normal(size=(5, 3))
        z = rng.normal(size=(5, 2))
        batch = JointBatch(x=Tensor(x), z=Tensor(z), origin="variational_q")
        log_p, log_q = pair.log_densities(batch)
        gz = pair.decoder.forward_array(z)
        hx = pair.encoder.forward_array(x)

        def norm_logpdf(v, mean, sigma):
            return sum(-0.5 * ((vi - mi) / sigma) ** 2
                       - 0.5 * math.log(2 * math.pi * sigma**2)
                       for vi, mi in zip(v, mean))

        for i in range(5):
            expected_p = norm_logpdf(x[i], gz[i], 0.1) + norm_logpdf(z[i], [0, 0], 1.0)
            expected_q = norm_logpdf(z[i], hx[i], 0.1)
            assert float(log_p.data[i]) == pytest.approx(expected_p, rel=1e-12)
            assert float(log_q.data[i]) == pytest.approx(expected_q, rel=1e-12)

    def test_normalization_by_quadrature(self):
        grid = np.linspace(-8, 8, 4001)[:, None]
        logpdf = gaussian_row_logpdf(Tensor(grid), 0.3, 0.7)
        mass = np.trapezoid(np.exp(logpdf.data), grid[:, 0])
        assert abs(mass - 1.0) <= 1e-3

    def test_sigma_zero_rejected(self):
        with pytest.raises(ValueError, match="sigma"):
            gaussian_row_logpdf(Tensor([[0.0]]), 0.0, 0.0)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(15)
        pair = small_pair(rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(pair, path, meta={"image_shape": "1,3"})
        loaded, meta = load_checkpoint(path)
        assert meta["image_shape"] == "1,3"
        assert loaded.obs_noise_sigma == pair.obs_noise_sigma
        for orig, new in zip(pair.parameters(), loaded.parameters()):
            assert orig.name == new.name
            np.testing.assert_array_equal(orig.data, new.data)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("not a checkpoint\n")
        with pytest.raises(ValueError, match="wvi-checkpoint"):
            load_checkpoint(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_text("wvi-checkpoint 99\n")
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

    def test_truncated_params_rejected(self, tmp_path):
        rng = np.random.default_rng(16)
        pair = small_pair(rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(pair, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(line for line in lines
                                  if not line.startswith("param decoder.w0")) + "\n")
        with pytest.raises(ValueError, match="decoder.w0"):
            load_checkpoint(path)


class TestPairValidation:
    def test_mismatched_nets_rejected(self):
        dec = DenseNet([2, 3], rng=None, name="decoder")
        enc = DenseNet([4, 2], rng=None, name="encoder")
        with pytest.raises(ad.ShapeError, match="pair up"):
            ModelPair(dec, enc)

    def test_negative_sigma_rejected(self):
        dec = DenseNet([2, 3], rng=None, name="decoder")
        enc = DenseNet([3, 2], rng=None, name="encoder")
        with pytest.raises(ValueError, match="non-negative"):
            ModelPair(dec, enc, obs_noise_sigma=-0.1)
