import numpy as np
import pytest

from liprcp import lipnet
from liprcp.lipnet import (
    AffineLayer,
    DimensionError,
    LipschitzClassifier,
    build_orthogonal,
    forward,
    groupsort2,
    input_gradient,
    lipschitz_constant,
    train_toy,
)


def linear_model(weight, bias=None, orthogonal=False):
    weight = np.asarray(weight, dtype=float)
    if bias is None:
        bias = np.zeros(weight.shape[0])
    return LipschitzClassifier(
        layers=(AffineLayer(weight=weight, bias=bias, orthogonal=orthogonal),)
    )


def random_deep_model(rng, dims=(6, 6, 6, 4)):
    layers = tuple(
        build_orthogonal(dims[i], dims[i + 1], seed=int(rng.integers(1 << 30)))
        for i in range(len(dims) - 1)
    )
    return LipschitzClassifier(layers=layers)


class TestBuildOrthogonal:
    def test_rows_orthonormal(self):
        for seed in (0, 1, 42):
            layer = build_orthogonal(3, 3, seed=seed)
            assert layer.orthogonal
            assert lipnet.orthogonality_residual(layer.weight) <= 1e-9

    def test_single_householder_reflector(self):
        # I - 2 v v^T with v = (1, 0) reflects the first axis
        v = np.array([1.0, 0.0])
        w = np.eye(2) - 2.0 * np.outer(v, v)
        np.testing.assert_allclose(w, np.diag([-1.0, 1.0]))

    def test_operator_norm_is_one(self):
        layer = build_orthogonal(5, 5, seed=42)
        # independent oracle: full SVD
        top_singular = np.linalg.svd(layer.weight, compute_uv=False)[0]
        assert abs(top_singular - 1.0) <= 1e-9
        assert abs(lipnet.spectral_norm(layer.weight) - 1.0) <= 1e-9

    def test_wide_truncation(self):
        layer = build_orthogonal(6, 3, seed=5)
        assert layer.weight.shape == (3, 6)
        assert lipnet.orthogonality_residual(layer.weight) <= 1e-9

    def test_out_dim_too_large(self):
        with pytest.raises(DimensionError):
            build_orthogonal(3, 4, seed=0)


class TestForward:
    def test_groupsort2_pairs(self):
        np.testing.assert_allclose(
            groupsort2(np.array([3.0, 1.0, 2.0, 5.0])), [1.0, 3.0, 2.0, 5.0]
        )

    def test_groupsort2_odd_tail_passthrough(self):
        np.testing.assert_allclose(
            groupsort2(np.array([2.0, 1.0, -7.0])), [1.0, 2.0, -7.0]
        )

    def test_groupsort2_norm_preserving(self):
        rng = np.random.default_rng(0)
        v = rng.standard_normal((100, 8))
        np.testing.assert_array_equal(
            np.linalg.norm(groupsort2(v), axis=1), np.linalg.norm(v, axis=1)
        )

    def test_identity_model(self):
        model = linear_model(np.eye(3))
        x = np.array([0.1, -2.0, 7.0])
        np.testing.assert_allclose(forward(model, x), x)

    def test_scaling_layer(self):
        model = linear_model(2.0 * np.eye(2))
        np.testing.assert_allclose(forward(model, np.array([1.0, 1.0])), [2.0, 2.0])

    def test_dimension_mismatch(self):
        model = linear_model(np.eye(3))
        with pytest.raises(DimensionError):
            forward(model, np.zeros(4))


class TestLipschitzConstant:
    def test_all_orthogonal_is_exactly_one(self):
        rng = np.random.default_rng(3)
        model = random_deep_model(rng)
        assert lipschitz_constant(model) == 1.0

    def test_scaling(self):
        assert lipschitz_constant(linear_model(2.0 * np.eye(3))) == pytest.approx(2.0)

    def test_random_layer_vs_sampled_sup(self):
        rng = np.random.default_rng(42)
        w = rng.standard_normal((4, 4))
        sigma = lipnet.spectral_norm(w)
        dirs = rng.standard_normal((1_000_000, 4))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        sampled_sup = np.max(np.linalg.norm(dirs @ w.T, axis=1))
        assert sampled_sup <= sigma + 1e-12
        assert sigma - sampled_sup <= 1e-3

    def test_lipschitz_inequality_random_pairs(self):
        rng = np.random.default_rng(7)
        model = random_deep_model(rng)
        lip = lipschitz_constant(model)
        x = rng.standard_normal((10_000, 6))
        x2 = x + rng.standard_normal((10_000, 6))
        out_gap = np.linalg.norm(forward(model, x) - forward(model, x2), axis=1)
        in_gap = np.linalg.norm(x - x2, axis=1)
        assert np.all(out_gap <= lip * in_gap + 1e-9)


class TestInputGradient:
    def test_linear_model_gradient_is_row(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((3, 5))
        model = linear_model(w)
        rec = input_gradient(model, rng.standard_normal(5), 2)
        np.testing.assert_allclose(rec.input_gradient, w[2])

    def test_zero_weights_zero_gradient(self):
        model = linear_model(np.zeros((2, 3)))
        rec = input_gradient(model, np.ones(3), 0)
        np.testing.assert_array_equal(rec.input_gradient, 0.0)

    def test_against_central_differences(self):
        rng = np.random.default_rng(11)
        h = 1e-5
        for _ in range(20):
            model = random_deep_model(rng, dims=(4, 4, 3))
            x = rng.standard_normal(4)
            y = int(rng.integers(3))
            grad = input_gradient(model, x, y).input_gradient
            fd = np.empty(4)
            for i in range(4):
                e = np.zeros(4)
                e[i] = h
                fd[i] = (forward(model, x + e)[y] - forward(model, x - e)[y]) / (2 * h)
            denom = max(np.linalg.norm(fd), 1e-12)
            assert np.linalg.norm(grad - fd) / denom <= 1e-4

    def test_gradient_norm_bounded_by_lipschitz_product(self):
        rng = np.random.default_rng(13)
        model = random_deep_model(rng)
        for _ in range(50):
            rec = input_gradient(model, rng.standard_normal(6), int(rng.integers(4)))
            assert np.linalg.norm(rec.input_gradient) <= model.lipschitz_product + 1e-6


class TestTrainToy:
    def make_task(self, seed=0, n=200):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=n)
        means = np.array([[-3.0, 0.0], [3.0, 0.0]])
        return means[labels] + rng.standard_normal((n, 2)), labels

    def test_zero_epochs_is_identity(self):
        model = linear_model(np.eye(2), orthogonal=True)
        x, y = self.make_task()
        assert train_toy(model, x, y, epochs=0, lr=0.1) is model

    def test_learns_separable_task(self):
        x, y = self.make_task(seed=5)
        model = LipschitzClassifier(
            layers=(build_orthogonal(2, 2, seed=1), build_orthogonal(2, 2, seed=2))
        )
        trained = train_toy(model, x, y, epochs=200, lr=0.5)
        acc = np.mean(np.argmax(forward(trained, x), axis=1) == y)
        assert acc >= 0.9

    def test_orthogonality_preserved(self):
        x, y = self.make_task(seed=6)
        model = LipschitzClassifier(
            layers=(build_orthogonal(2, 2, seed=3), build_orthogonal(2, 2, seed=4))
        )
        trained = train_toy(model, x, y, epochs=50, lr=0.3)
        for layer in trained.layers:
            assert lipnet.orthogonality_residual(layer.weight) <= 1e-8
        assert trained.lipschitz_product == 1.0


class TestSerialization:
    def test_round_trip_bit_stable(self):
        rng = np.random.default_rng(9)
        model = random_deep_model(rng)
        text = lipnet.to_json(model)
        back = lipnet.from_json(text)
        for a, b in zip(model.layers, back.layers):
            np.testing.assert_array_equal(a.weight, b.weight)
            np.testing.assert_array_equal(a.bias, b.bias)
            assert a.orthogonal == b.orthogonal
        assert lipnet.to_json(back) == text

    def test_linear_ball_infimum_closed_form(self):
        # single affine model: inf of logit y over the ball is exactly
        # logit_y - eps * ||row_y||
        rng = np.random.default_rng(21)
        w = rng.standard_normal((3, 4))
        model = linear_model(w)
        x = rng.standard_normal(4)
        eps = 0.7
        for y in range(3):
            direction = -w[y] / np.linalg.norm(w[y])
            achieved = forward(model, x + eps * direction)[y]
            expected = forward(model, x)[y] - eps * np.linalg.norm(w[y])
            assert achieved == pytest.approx(expected, abs=1e-12)
