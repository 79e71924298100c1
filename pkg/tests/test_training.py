import numpy as np
import pytest

from revmap import autodiff as ad
from revmap import maps, training
from revmap.datasets import Dataset
from revmap.errors import ConfigError, InputError, TrainingError

from oracles import svd_sigma_max


def linear_dataset(n=1024, d=4, latent=2, seed=0, scale=1.0):
    """xdot = B a_true with a fixed map B; states are irrelevant noise."""
    rng = np.random.default_rng(seed)
    b = rng.standard_normal((d, latent))
    a_true = rng.standard_normal((n, latent)) * scale
    states = rng.standard_normal((n, d))
    velocities = a_true @ b.T
    return Dataset(states, velocities, {"source": "linear-synthetic"})


def identity_action_model():
    """g(x, xdot) = xdot, f(x, a) = a: a perfectly reconstructing odd pair."""
    enc = maps.EncoderParams(
        maps.MlpParams([ad.DenseLayerParams(np.array([[0.0, 1.0]]))]),
        state_dim=1,
        action_dim=1,
    )
    dec = maps.AeDecoderParams(
        maps.MlpParams([ad.DenseLayerParams(np.array([[0.0, 1.0]]))]),
        state_dim=1,
        action_dim=1,
    )
    return enc, dec


class TestReconLoss:
    def test_perfect_prediction(self):
        v = np.array([1.0, 2.0])
        assert training.recon_loss(v, v) == 0.0

    def test_hand_value(self):
        assert training.recon_loss(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == 0.5

    def test_quadratic_scaling(self):
        xd = np.zeros(3)
        one = training.recon_loss(xd, np.full(3, 0.1))
        two = training.recon_loss(xd, np.full(3, 0.2))
        np.testing.assert_allclose(two, 4.0 * one, rtol=1e-12)

    def test_batch_mean(self):
        xd = np.zeros((4, 2))
        pred = np.ones((4, 2))
        assert training.recon_loss(xd, pred) == 0.5 * 2.0


class TestReversibilityRegularizer:
    def test_perfect_odd_model_vanishes(self):
        enc, dec = identity_action_model()
        x = np.array([[0.3], [-1.2]])
        xdot = np.array([[0.7], [-0.4]])
        reg = training.reversibility_regularizer(dec, enc, x, xdot)
        assert reg == 0.0

    def test_scn_mirrored_term_carries_only_reconstruction(self):
        # architectural oddness: the mirrored term equals the plain
        # reconstruction residual, and the zero-action term vanishes
        model = maps.build_model(
            "scn", state_dim=3, space=maps.ActionSpace(n=2), seed=1, hidden=6, feature_width=5
        )
        rng = np.random.default_rng(2)
        x = rng.standard_normal((8, 3))
        xdot = rng.standard_normal((8, 3))

        t2 = training.reversibility_regularizer(
            model.decoder, model.encoder, x, xdot, weights=(0.0, 1.0, 0.0)
        )
        assert t2 <= 1e-20

        t1 = training.reversibility_regularizer(
            model.decoder, model.encoder, x, xdot, weights=(1.0, 0.0, 0.0)
        )
        a = maps.encode(model.encoder, x, xdot)
        recon_resid = float(
            np.mean(np.sum((model.decode(x, a) - xdot) ** 2, axis=1))
        )
        assert abs(t1 - recon_resid) <= 1e-20

    def test_hand_counterexample(self):
        # f(x, a) = a + 1 with g = 0 and xdot = f(x, a): mirrored term is 4
        enc = maps.EncoderParams(
            maps.MlpParams([ad.DenseLayerParams(np.zeros((1, 2)))]),
            state_dim=1,
            action_dim=1,
        )
        dec = maps.AeDecoderParams(
            maps.MlpParams([ad.DenseLayerParams(np.array([[0.0, 1.0]]), np.array([1.0]))]),
            state_dim=1,
            action_dim=1,
        )
        x = np.array([[0.0]])
        xdot = dec.velocity(x, np.array([[0.0]]))
        t1 = training.reversibility_regularizer(dec, enc, x, xdot, weights=(1.0, 0.0, 0.0))
        assert t1 == pytest.approx(4.0, abs=1e-15)


class TestSplitDataset:
    def test_paper_fractions(self):
        ds = linear_dataset(n=10_000)
        tr, va, te = training.split_dataset(ds, (0.9, 0.05, 0.05), seed=3)
        assert (len(tr), len(va), len(te)) == (9000, 500, 500)

    def test_degenerate_split(self):
        ds = linear_dataset(n=100)
        tr, va, te = training.split_dataset(ds, (1.0, 0.0, 0.0))
        assert (len(tr), len(va), len(te)) == (100, 0, 0)

    def test_same_seed_identical(self):
        ds = linear_dataset(n=200)
        a = training.split_dataset(ds, seed=9)
        b = training.split_dataset(ds, seed=9)
        for x, y in zip(a, b):
            assert x.states.tobytes() == y.states.tobytes()

    def test_remainder_goes_to_train(self):
        ds = linear_dataset(n=101)
        tr, va, te = training.split_dataset(ds, (0.9, 0.05, 0.05))
        assert (len(tr), len(va), len(te)) == (91, 5, 5)

    def test_too_small_rejected(self):
        ds = linear_dataset(n=19)
        with pytest.raises(InputError):
            training.split_dataset(ds)

    def test_bad_fractions_rejected(self):
        ds = linear_dataset(n=100)
        with pytest.raises(InputError):
            training.split_dataset(ds, (0.5, 0.2, 0.2))


class TestLipschitzProject:
    def _dense_decoder(self, weights):
        layers = [ad.DenseLayerParams(w) for w in weights]
        return maps.AeDecoderParams(maps.MlpParams(layers), state_dim=2, action_dim=1)

    def test_single_layer_scaled_to_target(self):
        dec = self._dense_decoder([np.diag([4.0, 1.0])])
        lip = training.LipschitzConfig(target=2.0, lam=2.0, m_action=1.0)
        assert svd_sigma_max(dec.mlp.layers[0].weight) == pytest.approx(4.0)
        training.lipschitz_project(dec, lip)
        assert svd_sigma_max(dec.mlp.layers[0].weight) == pytest.approx(2.0, rel=1e-9)

    def test_satisfied_layer_untouched(self):
        w = np.diag([0.5, 0.2])
        dec = self._dense_decoder([w.copy()])
        training.lipschitz_project(dec, training.LipschitzConfig(target=2.0, lam=2.0, m_action=1.0))
        assert dec.mlp.layers[0].weight.tobytes() == w.tobytes()

    def test_default_m_action_is_sqrt2(self):
        assert training.LipschitzConfig().m_action == pytest.approx(np.sqrt(2.0))

    def test_running_bound_invariant_and_idempotence(self):
        rng = np.random.default_rng(21)
        weights = [rng.standard_normal((6, 3)) * 2, rng.standard_normal((4, 6)) * 2]
        dec = self._dense_decoder(weights)
        lip = training.LipschitzConfig(target=0.125, m_action=np.sqrt(2.0))
        training.lipschitz_project(dec, lip)

        # recompute the running bound chain with the SVD oracle
        lam = 0.125 ** (1.0 / 2.0)
        a_bound = np.sqrt(2.0)
        for i, layer in enumerate(dec.mlp.layers):
            sigma = svd_sigma_max(layer.weight)
            assert a_bound * sigma <= lam + 1e-9
            rows = np.abs(layer.weight).sum(axis=1)
            kind = "tanh" if i < len(dec.mlp.layers) - 1 else "identity"
            a_bound = float(np.linalg.norm(ad.activation(kind, rows)))

        before = [layer.weight.copy() for layer in dec.mlp.layers]
        training.lipschitz_project(dec, lip)
        for w_before, layer in zip(before, dec.mlp.layers):
            assert np.max(np.abs(w_before - layer.weight)) <= 1e-12

    def test_tensor_layers_projected_via_reshape(self):
        rng = np.random.default_rng(22)
        model = maps.build_model(
            "scn", state_dim=3, space=maps.ActionSpace(n=2), seed=22, hidden=5, feature_width=4
        )
        for layer in model.decoder.layers:
            layer.H *= 10.0
        lip = training.LipschitzConfig(target=0.125, m_action=np.sqrt(2.0))
        training.lipschitz_project(model.decoder, lip)
        lam = 0.125 ** (1.0 / 3.0)
        a_bound = np.sqrt(2.0)
        for i, layer in enumerate(model.decoder.layers):
            h, w, n = layer.H.shape
            sigma = svd_sigma_max(layer.H.reshape(h, w * n))
            assert a_bound * sigma <= lam + 1e-9
            rows = np.abs(layer.H).sum(axis=(1, 2))
            kind = "tanh" if i < len(model.decoder.layers) - 1 else "identity"
            a_bound = float(np.linalg.norm(np.tanh(rows)) if kind == "tanh" else np.linalg.norm(rows))

    def test_unsupported_decoder_rejected(self):
        model = maps.build_model("scl", state_dim=2, seed=0, hidden=4)
        deployed = maps.DeployedHyperLinear(model.decoder)
        with pytest.raises(ConfigError):
            training.lipschitz_project(deployed, training.LipschitzConfig())


class TestTrainLoop:
    def _train_scl(self, seed=0, epochs=200):
        ds = linear_dataset(n=1024, d=4, latent=2, seed=seed)
        splits = training.split_dataset(ds, (0.9, 0.05, 0.05), seed=seed)
        model = maps.build_model(
            "scl", state_dim=4, space=maps.ActionSpace(n=2), seed=seed, depth=1
        )
        cfg = training.TrainConfig(epochs=epochs, batch_size=64, lr=0.01, seed=seed)
        report = training.train(model, splits, cfg)
        return model, report

    def test_realizable_linear_task_converges(self):
        _, report = self._train_scl()
        assert report.final_test_mse <= 1e-8
        assert report.log10_test_mse <= -8.0

    def test_training_loss_nonincreasing_on_realizable_task(self):
        _, report = self._train_scl()
        losses = np.array(report.train_losses)
        assert np.all(np.diff(losses) <= 1e-6)

    def test_fixed_seed_bit_identical_report(self):
        # wall_clock is the one nondeterministic field by construction
        _, r1 = self._train_scl(seed=5, epochs=12)
        _, r2 = self._train_scl(seed=5, epochs=12)
        assert r1.train_losses == r2.train_losses
        assert r1.val_losses == r2.val_losses
        assert r1.final_test_mse == r2.final_test_mse

    def test_nonfinite_loss_aborts_with_location(self):
        ds = linear_dataset(n=128, d=3, latent=2)
        ds.velocities[5] = np.nan
        splits = (ds, ds.subset(slice(0, 8)), ds.subset(slice(0, 8)))
        model = maps.build_model("ae", state_dim=3, seed=1, hidden=8)
        cfg = training.TrainConfig(epochs=2, batch_size=128, seed=1)
        with pytest.raises(TrainingError, match="epoch 0"):
            training.train(model, splits, cfg)

    def test_projection_enforced_after_every_step(self):
        ds = linear_dataset(n=256, d=3, latent=2, seed=7)
        splits = training.split_dataset(ds, (0.9, 0.05, 0.05), seed=7)
        model = maps.build_model(
            "scn", state_dim=3, space=maps.ActionSpace(n=2), seed=7, hidden=6, feature_width=5
        )
        lip = training.LipschitzConfig(target=0.125)
        cfg = training.TrainConfig(epochs=3, batch_size=64, seed=7, lipschitz=True)
        training.train(model, splits, cfg, lip)
        lam = 0.125 ** (1.0 / 3.0)
        a_bound = np.sqrt(2.0)
        for i, layer in enumerate(model.decoder.layers):
            h, w, n = layer.H.shape
            sigma = svd_sigma_max(layer.H.reshape(h, w * n))
            assert a_bound * sigma <= lam + 1e-9
            rows = np.abs(layer.H).sum(axis=(1, 2))
            kind = "tanh" if i < len(model.decoder.layers) - 1 else "identity"
            a_bound = float(np.linalg.norm(ad.activation(kind, rows)))

    def test_regularizer_reduces_decoder_reg_terms(self):
        ds = linear_dataset(n=512, d=3, latent=2, seed=11, scale=0.5)
        splits = training.split_dataset(ds, (0.9, 0.05, 0.05), seed=11)
        model = maps.build_model("ae", state_dim=3, seed=11, hidden=16)
        val = splits[1]

        def decoder_terms(m):
            return training.reversibility_regularizer(
                m.decoder, m.encoder, val.states, val.velocities, weights=(1.0, 1.0, 0.0)
            )

        before = decoder_terms(model)
        cfg = training.TrainConfig(epochs=60, batch_size=64, regularize=True, seed=11)
        training.train(model, splits, cfg)
        after = decoder_terms(model)
        assert after < before

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            training.TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            training.TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            training.TrainConfig(reg_weights=(-1.0, 1.0, 1.0))
        with pytest.raises(ConfigError):
            training.LipschitzConfig(target=0.0)

    def test_paper_defaults(self):
        cfg = training.TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.lr) == (1000, 256, 1e-3)
