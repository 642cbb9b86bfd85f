import math
import zlib

import numpy as np
import pytest

from crowdloss.annotations import MISSING
from crowdloss.losses import LossSpec, batch_targets, loss_mlc
from crowdloss.model import (Batch, Dims, ModelParams, compute_gradients, forward, forward_mixup,
                             init_model, load_checkpoint, predict_proba, save_checkpoint)

from conftest import max_relative_error, numeric_gradient, random_labels

NO_REG = dict(entropy_penalty_coeff=0.0, class_balance_coeff=0.0)


class TestInit:
    def test_parameter_count(self):
        assert Dims(4, 8, 2, 3, 1).num_params == 94
        assert init_model(Dims(4, 8, 2, 3, 1), 0).num_params == 94

    def test_deterministic(self):
        dims = Dims(5, 7, 3, 2, 2)
        assert init_model(dims, 11) == init_model(dims, 11)
        assert init_model(dims, 11) != init_model(dims, 12)

    def test_biases_zero_and_scaled_weights(self):
        dims = Dims(50, 400, 2, 3, 2)
        model = init_model(dims, 0)
        for W, b in model.encoder:
            assert not b.any()
            assert W.std() * math.sqrt(W.shape[0]) == pytest.approx(1.0, rel=0.05)
        assert not model.head_b.any()

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            init_model(Dims(0, 4, 2, 1, 1), 0)


class TestForward:
    def test_zero_model_is_uniform(self):
        dims = Dims(3, 4, 3, 2, 2)
        model = ModelParams(dims, np.zeros(dims.num_params))
        trace = forward(model, np.array([1.0, -2.0, 0.5]))
        np.testing.assert_allclose(trace.probs, np.full((2, 3), 1 / 3), atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        model = init_model(Dims(4, 6, 3, 5, 2), 3)
        probs = predict_proba(model, rng.standard_normal((20, 4)) * 5)
        np.testing.assert_allclose(probs.sum(axis=2), 1.0, atol=1e-9)
        assert (probs >= 0).all()

    def test_scalar_network_closed_form(self):
        dims = Dims(1, 1, 2, 1, 1)
        w, b, v0, v1, c0, c1 = 0.7, -0.2, 1.5, -0.5, 0.1, 0.3
        model = ModelParams(dims, np.array([w, b, v0, v1, c0, c1]))
        x = 0.9
        h = math.tanh(w * x + b)
        l0, l1 = v0 * h + c0, v1 * h + c1
        p1 = 1.0 / (1.0 + math.exp(l0 - l1))
        trace = forward(model, np.array([x]))
        assert trace.probs[0, 1] == pytest.approx(p1, abs=1e-15)
        assert trace.activations[1][0] == pytest.approx(h, abs=1e-15)

    def test_deterministic(self, rng):
        model = init_model(Dims(4, 6, 2, 3, 2), 0)
        x = rng.standard_normal(4)
        assert np.array_equal(forward(model, x).probs, forward(model, x).probs)


class TestMixup:
    @pytest.fixture
    def setup(self, rng):
        return init_model(Dims(4, 6, 2, 3, 2), 1), rng.standard_normal(4), rng.standard_normal(4)

    @pytest.mark.parametrize("layer", [0, 1, 2])
    def test_degenerate_lambdas(self, setup, layer):
        model, xi, xj = setup
        np.testing.assert_array_equal(forward_mixup(model, xi, xj, 1.0, layer).probs,
                                      forward(model, xi).probs)
        np.testing.assert_array_equal(forward_mixup(model, xi, xj, 0.0, layer).probs,
                                      forward(model, xj).probs)

    def test_input_mix_is_midpoint(self, setup):
        model, xi, xj = setup
        np.testing.assert_allclose(forward_mixup(model, xi, xj, 0.5, 0).probs,
                                   forward(model, (xi + xj) / 2).probs, atol=1e-15)

    def test_metadata_and_validation(self, setup):
        model, xi, xj = setup
        assert forward_mixup(model, xi, xj, 0.3, 2).mix == {"lambda": 0.3, "layer": 2}
        with pytest.raises(ValueError):
            forward_mixup(model, xi, xj, 1.5, 0)
        with pytest.raises(ValueError):
            forward_mixup(model, xi, xj, 0.5, 3)

    @pytest.mark.parametrize("layer", [0, 1, 2])
    def test_continuous_in_lambda(self, setup, layer):
        model, xi, xj = setup
        for lam in np.linspace(0.05, 0.95, 7):
            a = forward_mixup(model, xi, xj, lam, layer).probs
            b = forward_mixup(model, xi, xj, lam + 1e-8, layer).probs
            assert np.abs(a - b).max() < 1e-6


def _fd_case(rng, dims, spec, correction, mixup_layer=None, batch=5):
    model = init_model(dims, int(rng.integers(1000)))
    model = model.like(model.vector + 0.1 * rng.standard_normal(model.num_params))
    X = rng.standard_normal((batch, dims.input))
    labels = random_labels(rng, batch, dims.annotators, dims.classes)
    weights = guesses = None
    if correction:
        weights = rng.random((batch, dims.annotators))
        guesses = rng.dirichlet(np.ones(dims.classes), size=(batch, dims.annotators))
    b = Batch(X, labels, weights, guesses)
    if mixup_layer is not None:
        b.mix_perm = rng.permutation(batch)
        b.mix_lambda = float(rng.uniform(0.1, 0.9))
        b.mix_layer = mixup_layer
    return model, b


@pytest.mark.parametrize("mixup_layer", [None, 0, 1, 2])
@pytest.mark.parametrize("psi", [0.0, 0.5, 1.0])
@pytest.mark.parametrize("mode", ["baseline", "baseline_lc", "multitask", "multitask_lc"])
def test_gradient_matches_finite_differences(mode, psi, mixup_layer):
    rng = np.random.default_rng(zlib.crc32(repr((mode, psi, mixup_layer)).encode()))
    annotators = 1 if mode.startswith("baseline") else 3
    dims = Dims(4, 5, 2, annotators, 2)
    spec = LossSpec(mode, psi=psi)
    model, batch = _fd_case(rng, dims, spec, mode.endswith("_lc"), mixup_layer)
    grad, _ = compute_gradients(model, batch, spec)
    numeric = numeric_gradient(lambda v: compute_gradients(model.like(v), batch, spec)[1], model.vector)
    assert max_relative_error(grad.vector, numeric) < 1e-4


def test_gradient_94_parameter_model(rng):
    dims = Dims(4, 8, 2, 3, 1)
    spec = LossSpec("multitask_lc", psi=0.5)
    model, batch = _fd_case(rng, dims, spec, True, mixup_layer=1, batch=7)
    grad, _ = compute_gradients(model, batch, spec)
    numeric = numeric_gradient(lambda v: compute_gradients(model.like(v), batch, spec)[1], model.vector)
    assert max_relative_error(grad.vector, numeric) < 1e-4


def test_gradient_three_classes(rng):
    dims = Dims(3, 4, 3, 2, 2)
    spec = LossSpec("multitask_lc", psi=0.7, mt_norm="total")
    model, batch = _fd_case(rng, dims, spec, True, mixup_layer=2)
    grad, _ = compute_gradients(model, batch, spec)
    numeric = numeric_gradient(lambda v: compute_gradients(model.like(v), batch, spec)[1], model.vector)
    assert max_relative_error(grad.vector, numeric) < 1e-4


def test_loss_equals_mean_mlc(rng):
    dims = Dims(3, 4, 2, 4, 2)
    model = init_model(dims, 0)
    X = rng.standard_normal((6, 3))
    labels = random_labels(rng, 6, 4)
    w = rng.random((6, 4))
    z = rng.dirichlet([1, 1], size=(6, 4))
    spec = LossSpec("multitask_lc", psi=0.8, **NO_REG)
    _, loss = compute_gradients(model, Batch(X, labels, w, z), spec)
    p = predict_proba(model, X)
    expected = np.mean([loss_mlc(p[i], labels[i], z[i], w[i], 0.8) for i in range(6)])
    assert loss == pytest.approx(expected, abs=1e-12)


def test_matching_prediction_has_zero_head_gradient():
    dims = Dims(2, 3, 2, 1, 1)
    model = init_model(dims, 0)
    model.head_b[0] = [40.0, -40.0]
    batch = Batch(np.array([[0.3, -0.1]]), np.array([[0]]))
    grad, _ = compute_gradients(model, batch, LossSpec("baseline", **NO_REG))
    assert np.abs(grad.head_W).max() < 1e-9
    assert np.abs(grad.head_b).max() < 1e-9


def test_missing_heads_get_exactly_zero_gradient(rng):
    dims = Dims(3, 4, 2, 3, 2)
    model = init_model(dims, 2)
    batch = Batch(rng.standard_normal((1, 3)), np.array([[MISSING, MISSING, 1]]))
    grad, _ = compute_gradients(model, batch, LossSpec("multitask", **NO_REG))
    assert not grad.head_W[:2].any()
    assert not grad.head_b[:2].any()
    assert grad.head_W[2].any()


def test_absent_annotator_column_changes_nothing(rng):
    dims = Dims(3, 4, 2, 2, 2)
    model = init_model(dims, 5)
    X = rng.standard_normal((4, 3))
    labels = random_labels(rng, 4, 2, p_missing=0.0)
    spec = LossSpec("multitask", **NO_REG)
    grad, loss = compute_gradients(model, Batch(X, labels), spec)

    wide_dims = Dims(3, 4, 2, 3, 2)
    wide = init_model(wide_dims, 0)
    wide.vector[:] = 0.0
    for (W, b), (W2, b2) in zip(wide.encoder, model.encoder):
        W[...], b[...] = W2, b2
    wide.head_W[:2], wide.head_b[:2] = model.head_W, model.head_b
    wide.head_W[2] = rng.standard_normal((4, 2))
    wide_labels = np.column_stack([labels, np.full(4, MISSING)])
    wgrad, wloss = compute_gradients(wide, Batch(X, wide_labels), spec)
    assert wloss == pytest.approx(loss, abs=1e-15)
    np.testing.assert_allclose(wgrad.head_W[:2], grad.head_W, atol=1e-15)
    for (gW, gb), (hW, hb) in zip(wgrad.encoder, grad.encoder):
        np.testing.assert_allclose(gW, hW, atol=1e-15)
    assert not wgrad.head_W[2].any()


def test_batch_targets_missing_cells_are_zero(rng):
    labels = np.array([[1, MISSING], [MISSING, 0]])
    T = batch_targets(labels, 2, rng.random((2, 2)), rng.dirichlet([1, 1], size=(2, 2)), 0.5)
    assert not T[0, 1].any() and not T[1, 0].any()


def test_checkpoint_round_trip(tmp_path):
    model = init_model(Dims(4, 8, 2, 3, 1), 7)
    path = tmp_path / "m.json"
    save_checkpoint(model, path, {"seed": 7})
    assert load_checkpoint(path) == model
