import math

import numpy as np
import pytest
from conftest import rel_error

from ucfl import model
from ucfl.client import LocalTrainConfig, client_update
from ucfl.datagen import LabeledDataset, make_gaussian_blobs
from ucfl.errors import StructuralError, ValidationError
from ucfl.numerics import RngStream, finite_diff_gradient

H = 1e-5


def test_dims():
    assert model.ModelSpec("softmax-linear", 2, 2).dim == 6
    assert model.ModelSpec("mlp-1", 4, 3, hidden=8).dim == 4 * 8 + 8 + 8 * 3 + 3 == 67


def test_spec_validation():
    for args in [("conv", 2, 2), ("softmax-linear", 0, 2), ("softmax-linear", 2, 1)]:
        with pytest.raises(ValidationError):
            model.ModelSpec(*args)
    with pytest.raises(ValidationError):
        model.ModelSpec("mlp-1", 2, 2, hidden=0)


def test_flatten_order():
    spec = model.ModelSpec("mlp-1", 2, 3, hidden=2)
    theta = np.arange(spec.dim, dtype=float)
    (W1, b1), (W2, b2) = model.unflatten(spec, theta)
    np.testing.assert_array_equal(W1, [[0, 1], [2, 3]])
    np.testing.assert_array_equal(b1, [4, 5])
    np.testing.assert_array_equal(W2, [[6, 7, 8], [9, 10, 11]])
    np.testing.assert_array_equal(b2, [12, 13, 14])
    with pytest.raises(StructuralError):
        model.unflatten(spec, theta[:-1])


def test_init_deterministic():
    spec = model.ModelSpec("mlp-1", 3, 4, hidden=5)
    a = model.init_params(spec, RngStream(3, "init"))
    b = model.init_params(spec, RngStream(3, "init"))
    assert a.tobytes() == b.tobytes()
    (_, b1), (_, b2) = model.unflatten(spec, a)
    assert np.all(b1 == 0) and np.all(b2 == 0)


@pytest.mark.parametrize("C", [2, 10])
def test_zero_params_loss_is_log_C(C):
    spec = model.ModelSpec("softmax-linear", 3, C)
    gen = np.random.default_rng(0)
    data = LabeledDataset(gen.normal(size=(17, 3)), gen.integers(0, C, 17), C)
    assert model.loss(spec, np.zeros(spec.dim), data) == pytest.approx(math.log(C), abs=1e-12)


def test_loss_extreme_logits_finite():
    spec = model.ModelSpec("softmax-linear", 1, 2)
    data = LabeledDataset(np.array([[1.0]]), np.array([1]), 2)
    theta = np.array([1e4, -1e4, 0.0, 0.0])
    assert model.loss(spec, theta, data) == pytest.approx(2e4)


def _draw_case(gen, kind, activation):
    p, C = gen.integers(1, 6), gen.integers(2, 6)
    Hd = gen.integers(1, 6) if kind == "mlp-1" else 0
    spec = model.ModelSpec(kind, int(p), int(C), int(Hd), activation)
    n = int(gen.integers(1, 12))
    data = LabeledDataset(gen.normal(size=(n, p)), gen.integers(0, C, n), int(C))
    return spec, data


def _near_kink(spec, theta, data):
    if spec.kind != "mlp-1" or spec.activation != "relu":
        return False
    (W1, b1), _ = model.unflatten(spec, theta)
    pre = data.features @ W1 + b1
    # a coordinate step of h moves a pre-activation by at most h * (1 + max|x|)
    return np.min(np.abs(pre)) < 10 * H * (1 + np.max(np.abs(data.features)))


@pytest.mark.parametrize("kind, activation", [("softmax-linear", "relu"), ("mlp-1", "relu"), ("mlp-1", "tanh")])
def test_gradient_matches_finite_differences(kind, activation):
    gen = np.random.default_rng(100)
    worst, cases = 0.0, 0
    while cases < 100:
        spec, data = _draw_case(gen, kind, activation)
        theta = gen.normal(size=spec.dim)
        if _near_kink(spec, theta, data):
            continue
        g = model.gradient(spec, theta, data)
        fd = finite_diff_gradient(lambda t: model.loss(spec, t, data), theta, h=H)
        worst = max(worst, rel_error(g, fd))
        cases += 1
    assert worst < 1e-5


def test_symmetric_batch_zero_bias_gradient(tiny):
    spec = model.ModelSpec("softmax-linear", 2, 2)
    X = np.array([[1.0, 2.0], [-1.0, -2.0]])
    data = LabeledDataset(X, np.array([0, 1]), 2)
    g = model.gradient(spec, np.zeros(spec.dim), data)
    np.testing.assert_allclose(g[-2:], [0.0, 0.0], atol=1e-15)


def test_duplicated_batch_same_gradient(blobs):
    spec = model.ModelSpec("mlp-1", 2, 4, hidden=5)
    theta = model.init_params(spec, RngStream(0, "init"))
    twice = LabeledDataset(np.vstack([blobs.features] * 2), np.concatenate([blobs.labels] * 2), 4)
    np.testing.assert_allclose(model.gradient(spec, theta, twice), model.gradient(spec, theta, blobs),
                               rtol=1e-12, atol=1e-15)


def test_loss_and_gradient_order_invariant(blobs):
    spec = model.ModelSpec("softmax-linear", 2, 4)
    theta = model.init_params(spec, RngStream(5, "init"))
    perm = np.random.default_rng(0).permutation(len(blobs))
    shuffled = blobs.subset(perm)
    assert model.loss(spec, theta, shuffled) == pytest.approx(model.loss(spec, theta, blobs), rel=1e-13)
    np.testing.assert_allclose(model.gradient(spec, theta, shuffled), model.gradient(spec, theta, blobs),
                               rtol=1e-11, atol=1e-14)


def test_zero_params_accuracy_tie_break():
    spec = model.ModelSpec("softmax-linear", 2, 2)
    data = LabeledDataset(np.random.default_rng(0).normal(size=(10, 2)), np.array([0, 1] * 5), 2)
    assert model.accuracy(spec, np.zeros(spec.dim), data) == 0.5
    assert np.all(model.predict(spec, np.zeros(spec.dim), data.features) == 0)


def test_separating_hyperplane_accuracy_one():
    data = make_gaussian_blobs(2, 2, 50, 0.01, RngStream(0, "b"))
    spec = model.ModelSpec("softmax-linear", 2, 2)
    # centers sit at (1, 0) and (-1, 0): the x-axis sign separates them
    theta = np.array([5.0, -5.0, 0.0, 0.0, 0.0, 0.0])
    assert model.accuracy(spec, theta, data) == 1.0


def test_random_labels_accuracy_near_chance():
    gen = np.random.default_rng(0)
    data = LabeledDataset(gen.normal(size=(10000, 3)), gen.integers(0, 10, 10000), 10)
    spec = model.ModelSpec("softmax-linear", 3, 10)
    theta = gen.normal(size=spec.dim)
    assert abs(model.accuracy(spec, theta, data) - 0.1) <= 0.02


def test_bias_shift_keeps_accuracy(blobs):
    spec = model.ModelSpec("softmax-linear", 2, 4)
    theta = np.array(model.init_params(spec, RngStream(1, "init")))
    shifted = theta.copy()
    shifted[-4:] += 3.7
    assert model.accuracy(spec, shifted, blobs) == model.accuracy(spec, theta, blobs)


def test_trained_on_separable_blobs_low_loss():
    data = make_gaussian_blobs(4, 2, 200, 0.05, RngStream(0, "sep"))
    spec = model.ModelSpec("softmax-linear", 2, 4)
    theta = model.init_params(spec, RngStream(0, "init"))
    theta = client_update(spec, theta, data, LocalTrainConfig(epochs=30), RngStream(0, "train"))
    assert model.loss(spec, theta, data) < 0.1


def test_predict_proba_rows_sum_to_one(blobs):
    spec = model.ModelSpec("mlp-1", 2, 4, hidden=3, activation="tanh")
    theta = model.init_params(spec, RngStream(2, "init"))
    P = model.predict_proba(spec, theta, blobs.features)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)


def test_feature_mismatch(blobs):
    spec = model.ModelSpec("softmax-linear", 3, 4)
    with pytest.raises(StructuralError):
        model.loss(spec, np.zeros(spec.dim), blobs)
