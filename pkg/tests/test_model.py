"""MLP forward/backward correctness on the flat parameter vector."""

import numpy as np
import pytest

from noisegate import MlpModel
from noisegate.numerics import stream


def make_model(input_dim=16, hidden_dim=8, n_classes=3, seed=1):
    model = MlpModel(input_dim, hidden_dim, n_classes)
    model.init_params(stream(seed, 2, 0))
    return model


class TestLayout:
    def test_dim_formula(self):
        assert MlpModel(784, 32, 10).dim == 784 * 32 + 32 + 32 * 10 + 10 == 25450
        assert MlpModel(16, 8, 3).dim == 16 * 8 + 8 + 8 * 3 + 3

    def test_unflatten_views_share_memory(self):
        model = make_model()
        w1, b1, w2, b2 = model.unflatten(model.params)
        w1[0, 0] = 123.0
        b2[-1] = -7.0
        assert model.params[0] == 123.0
        assert model.params[-1] == -7.0

    def test_unflatten_roundtrip(self):
        model = make_model()
        w1, b1, w2, b2 = model.unflatten(model.params)
        rebuilt = np.concatenate([w1.ravel(), b1, w2.ravel(), b2])
        np.testing.assert_array_equal(rebuilt, model.params)

    def test_unflatten_rejects_wrong_length(self):
        model = make_model()
        with pytest.raises(ValueError):
            model.unflatten(np.zeros(model.dim + 1))

    def test_bad_sizes_rejected(self):
        with pytest.raises(ValueError):
            MlpModel(0, 4, 2)


class TestInit:
    def test_weights_bounded_biases_zero(self):
        model = MlpModel(100, 50, 10)
        model.init_params(stream(0, 2, 0))
        w1, b1, w2, b2 = model.unflatten(model.params)
        a1 = np.sqrt(6.0 / 150)
        a2 = np.sqrt(6.0 / 60)
        assert np.all(np.abs(w1) <= a1) and np.all(np.abs(w2) <= a2)
        assert np.all(b1 == 0) and np.all(b2 == 0)
        # Draws actually fill the range rather than collapsing.
        assert w1.std() > a1 / 4

    def test_deterministic_per_stream(self):
        m1, m2 = make_model(seed=9), make_model(seed=9)
        np.testing.assert_array_equal(m1.params, m2.params)


class TestGradients:
    def test_batch_gradient_equals_mean_of_per_example(self):
        model = make_model()
        rng = stream(2, 0)
        features = rng.standard_normal((12, 16))
        labels = rng.integers(0, 3, size=12)
        per_ex = model.per_example_gradients(features, labels)
        assert per_ex.shape == (12, model.dim)
        np.testing.assert_allclose(per_ex.mean(axis=0),
                                   model.batch_gradient(features, labels),
                                   atol=1e-12)

    def test_single_example_row_matches(self):
        model = make_model()
        rng = stream(3, 0)
        features = rng.standard_normal((5, 16))
        labels = np.array([0, 1, 2, 1, 0])
        rows = model.per_example_gradients(features, labels)
        for i in range(5):
            np.testing.assert_allclose(
                model.per_example_gradient(features[i], int(labels[i])), rows[i],
                atol=1e-14)

    def test_matches_central_finite_differences(self):
        model = make_model()
        rng = stream(4, 0)
        features = rng.standard_normal((6, 16))
        labels = rng.integers(0, 3, size=6)
        analytic = model.batch_gradient(features, labels)
        eps = 1e-6
        coords = rng.choice(model.dim, size=40, replace=False)
        for j in coords:
            saved = model.params[j]
            model.params[j] = saved + eps
            up = model.loss(features, labels)
            model.params[j] = saved - eps
            down = model.loss(features, labels)
            model.params[j] = saved
            numeric = (up - down) / (2 * eps)
            assert analytic[j] == pytest.approx(numeric, rel=1e-5, abs=1e-9)

    def test_gradient_step_reduces_loss(self):
        model = make_model()
        rng = stream(5, 0)
        features = rng.standard_normal((32, 16))
        labels = rng.integers(0, 3, size=32)
        before = model.loss(features, labels)
        model.params -= 0.1 * model.batch_gradient(features, labels)
        assert model.loss(features, labels) < before


class TestEvaluateAndLoss:
    def test_zero_params_predicts_class_zero(self):
        # All logits equal, so argmax ties resolve to the lowest class index.
        model = MlpModel(4, 3, 5)
        features = stream(6, 0).standard_normal((40, 4))
        labels = np.full(40, 0)
        assert model.evaluate(features, labels) == 1.0
        assert model.evaluate(features, np.full(40, 2)) == 0.0

    def test_uniform_loss_at_zero_params(self):
        model = MlpModel(4, 3, 5)
        features = stream(7, 0).standard_normal((10, 4))
        labels = np.zeros(10, dtype=np.int64)
        assert model.loss(features, labels) == pytest.approx(np.log(5.0))

    def test_label_out_of_range_rejected(self):
        model = make_model()
        with pytest.raises(ValueError):
            model.loss(np.zeros((1, 16)), np.array([3]))

    def test_feature_dim_mismatch_rejected(self):
        model = make_model()
        with pytest.raises(ValueError):
            model.evaluate(np.zeros((2, 17)), np.zeros(2, dtype=int))

    def test_learns_separable_blobs(self):
        rng = stream(8, 0)
        means = np.array([[4.0, 0.0], [-4.0, 0.0], [0.0, 4.0]])
        features = np.vstack([m + rng.standard_normal((60, 2)) for m in means])
        labels = np.repeat([0, 1, 2], 60)
        model = MlpModel(2, 8, 3)
        model.init_params(stream(8, 2, 0))
        for _ in range(300):
            model.params -= 0.5 * model.batch_gradient(features, labels)
        assert model.evaluate(features, labels) >= 0.95
