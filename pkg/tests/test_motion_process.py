import math

import numpy as np
import pytest

from trifuse.config import AutoencoderConfig, GmmConfig, HmofConfig
from trifuse.core import FlowField, TargetRef
from trifuse.motion_process import (AutoencoderModel, GmmModel, compute_hmof, fit_gmm, gmm_log_likelihood,
                                    gmm_score_samples, load_autoencoder, load_gmm, loss_and_gradient, reconstruct,
                                    save_autoencoder, save_gmm, score_motion_batch, train_autoencoder)
from trifuse.util import DataError, NumericError

from conftest import uniform_flow


class TestHmof:
    def test_all_zero_flow(self):
        feature = compute_hmof(uniform_flow(6, 4, 0.0, 0.0), (0, 0, 6, 4), HmofConfig(8, 2.4))
        np.testing.assert_array_equal(feature.bins, [1, 0, 0, 0, 0, 0, 0, 0, 0])

    def test_overflow_bin(self):
        feature = compute_hmof(uniform_flow(6, 4, 3.0, 4.0), (1, 1, 3, 2), HmofConfig(8, 2.4))
        np.testing.assert_array_equal(feature.bins, [0, 0, 0, 0, 0, 0, 0, 0, 1])

    def test_half_and_half(self):
        vectors = np.zeros((2, 4, 2))
        vectors[:, :2, 0] = 0.1
        vectors[:, 2:, 1] = 1.0
        feature = compute_hmof(FlowField(4, 2, vectors), (0, 0, 4, 2), HmofConfig(8, 1.8))
        expected = np.zeros(9)
        expected[0] = expected[4] = 0.5
        np.testing.assert_array_equal(feature.bins, expected)

    def test_empty_region(self):
        with pytest.raises(DataError, match="empty region"):
            compute_hmof(uniform_flow(4, 4, 0, 0), (0, 0, 0, 2), HmofConfig())

    def test_sums_to_one_and_rotation_invariant(self):
        rng = np.random.default_rng(0)
        cfg = HmofConfig(8, 1.8)
        for _ in range(50):
            vectors = rng.normal(scale=1.5, size=(10, 12, 2))
            rotated = np.stack([-vectors[..., 1], vectors[..., 0]], axis=-1)
            bbox = (int(rng.integers(0, 6)), int(rng.integers(0, 5)), 6, 5)
            a = compute_hmof(FlowField(12, 10, vectors), bbox, cfg).bins
            b = compute_hmof(FlowField(12, 10, rotated), bbox, cfg).bins
            assert abs(a.sum() - 1.0) < 1e-9
            assert np.all((a >= 0) & (a <= 1))
            np.testing.assert_array_equal(a, b)


class TestAutoencoder:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        cfg = AutoencoderConfig()
        X = rng.dirichlet(np.ones(9), size=16)
        h = 1e-5
        for point in range(20):
            model = AutoencoderModel.initialize(cfg, seed=point)
            _, grads = loss_and_gradient(model, X)
            analytic = np.concatenate([g.ravel() for g in grads])
            theta = model.flat_parameters()
            numeric = np.empty_like(theta)
            for i in range(theta.size):
                up, down = theta.copy(), theta.copy()
                up[i] += h
                down[i] -= h
                model.set_flat_parameters(up)
                loss_up, _ = loss_and_gradient(model, X)
                model.set_flat_parameters(down)
                loss_down, _ = loss_and_gradient(model, X)
                numeric[i] = (loss_up - loss_down) / (2 * h)
            model.set_flat_parameters(theta)
            rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-300)
            assert rel < 1e-5

    def test_constant_feature_is_learned(self):
        f = np.array([0.0, 0.2, 0.5, 0.3, 0, 0, 0, 0, 0])
        model = train_autoencoder([f] * 20, AutoencoderConfig(epochs=3000))
        assert np.mean((reconstruct(model, f) - f) ** 2) < 1e-4
        assert len(model.loss_history) == 3001

    def test_zero_epochs_is_initialization(self):
        cfg = AutoencoderConfig(epochs=0, seed=9)
        X = np.random.default_rng(2).dirichlet(np.ones(9), size=5)
        model = train_autoencoder(X, cfg)
        init = AutoencoderModel.initialize(cfg, 9)
        np.testing.assert_array_equal(model.flat_parameters(), init.flat_parameters())
        assert model.loss_history == [loss_and_gradient(init, X)[0]]

    def test_identity_model(self):
        x = np.linspace(0, 1, 9)
        np.testing.assert_array_equal(reconstruct(AutoencoderModel.identity(9), x), x)

    def test_width_mismatch(self):
        with pytest.raises(DataError):
            reconstruct(AutoencoderModel.identity(9), np.zeros(5))

    def test_linear_loss_decreases(self):
        X = np.random.default_rng(3).dirichlet(np.ones(9), size=30)
        model = train_autoencoder(X, AutoencoderConfig(activation="linear", learning_rate=0.05, epochs=200))
        assert np.all(np.diff(model.loss_history) <= 1e-15)

    def test_divergence_names_epoch(self):
        X = np.random.default_rng(4).uniform(0, 100, size=(10, 9))
        with pytest.raises(NumericError, match="epoch"):
            train_autoencoder(X, AutoencoderConfig(activation="linear", learning_rate=50.0, epochs=500))

    def test_file_round_trip(self, tmp_path):
        model = AutoencoderModel.initialize(AutoencoderConfig(activation="tanh"), 5)
        path = str(tmp_path / "ae.tfae")
        save_autoencoder(model, path)
        loaded = load_autoencoder(path)
        assert loaded.activation == "tanh"
        np.testing.assert_array_equal(loaded.flat_parameters(), model.flat_parameters())

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "ae.tfae"
        save_autoencoder(AutoencoderModel.initialize(AutoencoderConfig(), 5), str(path))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(DataError, match="byte offset"):
            load_autoencoder(str(path))


class TestGmm:
    def test_single_component_matches_mle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n, d = int(rng.integers(5, 60)), int(rng.integers(1, 6))
            X = rng.normal(rng.uniform(-5, 5, d), rng.uniform(0.1, 3, d), size=(n, d))
            model = fit_gmm(X, GmmConfig(k=1, covariance_floor=1e-12))
            np.testing.assert_allclose(model.means[0], X.mean(axis=0), rtol=1e-8, atol=1e-12)
            np.testing.assert_allclose(model.variances[0], X.var(axis=0), rtol=1e-8)
            assert model.weights[0] == pytest.approx(1.0, abs=1e-12)

    def test_log_likelihood_is_monotone(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            X = np.vstack([rng.normal(c, 0.5, size=(30, 2)) for c in rng.uniform(-6, 6, size=(3, 2))])
            model = fit_gmm(X, GmmConfig(k=3), seed=int(rng.integers(1000)))
            if model.reseeds:
                continue
            assert np.all(np.diff(model.log_likelihood_history) >= -1e-9)
            assert model.weights.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(model.variances >= 1e-6)

    def test_separated_clusters(self):
        rng = np.random.default_rng(7)
        X = np.concatenate([rng.normal(0, 0.5, 300), rng.normal(100, 0.5, 700)])[:, None]
        model = fit_gmm(X, GmmConfig(k=2))
        order = np.argsort(model.means[:, 0])
        np.testing.assert_allclose(model.means[order, 0], [0, 100], atol=0.1)
        np.testing.assert_allclose(model.weights[order], [0.3, 0.7], atol=0.01)

    def test_repeated_point_hits_floor(self):
        model = fit_gmm(np.ones((10, 3)), GmmConfig(k=1))
        np.testing.assert_array_equal(model.variances, np.full((1, 3), 1e-6))

    def test_too_many_components(self):
        with pytest.raises(DataError):
            fit_gmm(np.zeros((3, 2)), GmmConfig(k=5))

    def test_standard_normal_log_likelihood(self):
        model = GmmModel(np.array([1.0]), np.array([[0.0]]), np.array([[1.0]]))
        assert gmm_log_likelihood(model, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
        assert gmm_log_likelihood(model, [2.0]) == pytest.approx(-0.5 * math.log(2 * math.pi) - 2.0, abs=1e-12)

    def test_mixture_bounds_and_permutation(self):
        rng = np.random.default_rng(8)
        weights = rng.dirichlet(np.ones(4))
        means = rng.normal(size=(4, 3))
        variances = rng.uniform(0.5, 2, size=(4, 3))
        model = GmmModel(weights, means, variances)
        perm = rng.permutation(4)
        permuted = GmmModel(weights[perm], means[perm], variances[perm])
        X = rng.normal(size=(50, 3))
        mixture = gmm_score_samples(model, X)
        np.testing.assert_allclose(gmm_score_samples(permuted, X), mixture, rtol=1e-12)
        for j in range(4):
            single = GmmModel(np.array([1.0]), means[j:j + 1], variances[j:j + 1])
            assert np.all(mixture >= np.log(weights[j]) + gmm_score_samples(single, X) - 1e-12)

    def test_file_round_trip(self, tmp_path):
        X = np.random.default_rng(9).normal(size=(40, 3))
        model = fit_gmm(X, GmmConfig(k=2))
        path = str(tmp_path / "gmm.tfgm")
        save_gmm(model, path)
        loaded = load_gmm(path)
        for name in ("weights", "means", "variances"):
            np.testing.assert_array_equal(getattr(loaded, name), getattr(model, name))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "gmm.tfgm"
        path.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(DataError, match="magic"):
            load_gmm(str(path))


class TestMotionScores:
    def test_inversion(self):
        model = GmmModel(np.array([1.0]), np.array([[0.0]]), np.array([[1.0]]))
        refs = [TargetRef(0, "a"), TargetRef(0, "b"), TargetRef(1, "a")]
        scored = score_motion_batch(list(zip(refs, [np.array([0.0]), np.array([0.5]), np.array([30.0])])), model)
        assert scored[0].normalized == 0.0 and scored[2].normalized == 1.0
        assert [s.ref for s in scored] == refs
        raws = [s.raw for s in scored]
        assert raws[0] > raws[1] > raws[2]

    def test_outlier_scores_one(self):
        rng = np.random.default_rng(10)
        model = fit_gmm(rng.normal(0, 0.1, size=(50, 2)), GmmConfig(k=1))
        tests = [(TargetRef(0, "a"), np.array([0.01, 0.0])), (TargetRef(0, "b"), np.array([-0.02, 0.03])),
                 (TargetRef(0, "c"), np.array([5.0, 5.0]))]
        assert score_motion_batch(tests, model)[2].normalized == 1.0

    def test_equal_likelihoods(self):
        model = GmmModel(np.array([1.0]), np.array([[0.0]]), np.array([[1.0]]))
        scored = score_motion_batch([(TargetRef(0, "a"), np.array([1.0])), (TargetRef(0, "b"), np.array([-1.0]))],
                                    model)
        assert [s.normalized for s in scored] == [0.5, 0.5]
