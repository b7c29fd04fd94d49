"""Tests for the MLP oracle, ensemble fusion, training and checkpoints"""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from datasets import generate_blobs
from models import (Activation, CheckpointCorruptError, CheckpointVersionError, DenseLayer, EnsembleModel,
                    FunctionOracle, LabeledExample, MlpModel, ModelError, TrainingDivergedError, accuracy,
                    checkpoint_bytes, ensemble_logits, load_checkpoint, mlp_forward,
                    model_from_checkpoint_bytes, predict, save_checkpoint, softmax, softmax_cross_entropy,
                    train_sgd)


def _finite_difference(oracle, x, label, h=1e-5):
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        grad.flat[i] = (oracle.loss(x + step, label) - oracle.loss(x - step, label)) / (2 * h)
    return grad


def test_input_gradient_matches_finite_differences():
    """Manual backprop agrees with central differences on 100 random (model, input, label) triples"""
    rng = np.random.default_rng(0)
    worst = 0.0
    for seed in range(100):
        model = MlpModel.initialize((6,), [8, 5], 3, seed)
        x = rng.uniform(0.2, 0.8, size=6)
        label = int(rng.integers(3))
        loss, grad = model.loss_and_input_grad(x, label)
        numeric = _finite_difference(model, x, label)
        assert loss == pytest.approx(model.loss(x, label))
        scale = max(np.linalg.norm(grad), np.linalg.norm(numeric), 1e-8)
        error = np.linalg.norm(grad - numeric) / scale
        assert error < 1e-4, f"seed {seed}: {grad} vs {numeric}"
        worst = max(worst, error)
    print(f"[OK] worst relative gradient error {worst:.2e}")


def test_softmax_cross_entropy_uniform_logits():
    loss, grad = softmax_cross_entropy(np.zeros(4), 2)
    assert loss == pytest.approx(np.log(4))
    assert grad.sum() == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(softmax(np.array([1000.0, 1000.0])), [0.5, 0.5]), "softmax must be shift-stable"


def test_mlp_rejects_bad_inputs():
    model = MlpModel.initialize((4,), [3], 2, 0)
    with pytest.raises(ModelError):
        model.logits(np.zeros(5))
    with pytest.raises(ModelError):
        model.loss_and_input_grad(np.zeros(4), 2)
    with pytest.raises(ModelError):
        EnsembleModel([])


def test_image_shaped_inputs_flatten():
    model = MlpModel.initialize((3, 3), [4], 2, 1)
    x = np.full((3, 3), 0.5)
    _, grad = model.loss_and_input_grad(x, 1)
    assert grad.shape == (3, 3)


def test_ensemble_weights_degenerate_to_single_member():
    a = MlpModel.initialize((5,), [6], 3, 1)
    b = MlpModel.initialize((5,), [6], 3, 2)
    x = np.linspace(0.1, 0.9, 5)
    ens = EnsembleModel([a, b], [1.0, 0.0])
    assert np.array_equal(ens.logits(x), a.logits(x))
    assert np.array_equal(ens.loss_and_input_grad(x, 0)[1], a.loss_and_input_grad(x, 0)[1])

    twins = EnsembleModel([a, a.copy()], [0.5, 0.5])
    assert np.allclose(twins.logits(x), a.logits(x))

    single = EnsembleModel([a])
    assert np.array_equal(single.logits(x), a.logits(x))
    assert np.array_equal(single.loss_and_input_grad(x, 2)[1], a.loss_and_input_grad(x, 2)[1])


def test_ensemble_gradient_is_weighted_vjp_of_fused_loss():
    """One cross-entropy on fused logits, back-propagated through every member"""
    members = [MlpModel.initialize((5,), [6], 3, s) for s in (1, 2, 3)]
    weights = [2.0, 1.0, 1.0]
    ens = EnsembleModel(members, weights)
    assert np.allclose(ens.weights, [0.5, 0.25, 0.25])
    x = np.linspace(0.2, 0.7, 5)
    fused = sum(w * m.logits(x) for w, m in zip(ens.weights, members))
    _, dz = softmax_cross_entropy(fused, 1)
    expected = sum(w * m.logits_vjp(x, dz) for w, m in zip(ens.weights, members))
    _, grad = ens.loss_and_input_grad(x, 1)
    assert np.allclose(grad, expected)


def test_ensemble_rejects_bad_weights():
    members = [MlpModel.initialize((5,), [6], 3, s) for s in (1, 2)]
    with pytest.raises(ModelError):
        EnsembleModel(members, [1.0, -0.5])
    with pytest.raises(ModelError):
        EnsembleModel(members, [1.0])
    with pytest.raises(ModelError):
        EnsembleModel(members + [MlpModel.initialize((4,), [6], 3, 3)])


def test_function_oracle_counts_gradient_calls():
    oracle = FunctionOracle(lambda x: float(np.sum(x ** 2)), lambda x: 2 * x, (2,))
    loss, grad = oracle.loss_and_input_grad(np.array([0.5, -1.0]), 0)
    assert loss == pytest.approx(1.25)
    assert np.array_equal(grad, [1.0, -2.0])
    assert oracle.gradient_calls == 1
    assert predict(oracle, np.zeros(2)) == 0
    with pytest.raises(ModelError):
        oracle.logits_vjp(np.zeros(2), np.zeros(2))


def test_training_is_deterministic_and_learns():
    data = generate_blobs(300, n_features=8, n_classes=3, separation=1.0, seed=4)
    train, test = data.split(0.5, seed=0)
    model = MlpModel.initialize(train.input_shape, [16], 3, 7)
    first = train_sgd(model, train.examples(), epochs=20, lr=0.05, seed=7)
    second = train_sgd(model, train.examples(), epochs=20, lr=0.05, seed=7)
    assert first == second, "same seed must give bitwise-identical weights"
    assert first != model, "training returns an updated copy"
    test_acc = accuracy(first, test.examples())
    assert test_acc > 0.8, f"test accuracy too low: {test_acc}"
    print(f"[OK] blob test accuracy {test_acc:.3f}")


def test_training_rejects_bad_parameters():
    model = MlpModel.initialize((2,), [3], 2, 0)
    data = [LabeledExample(np.array([0.1, 0.2]), 0)]
    with pytest.raises(ModelError):
        train_sgd(model, [], 1, 0.1, 0)
    with pytest.raises(ModelError):
        train_sgd(model, data, 1, 0.0, 0)


def test_checkpoint_round_trip(tmp_path):
    model = MlpModel.initialize((2, 3), [4, 5], 3, 11)
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    assert load_checkpoint(path) == model


def test_checkpoint_errors():
    data = checkpoint_bytes(MlpModel.initialize((4,), [3], 2, 0))
    with pytest.raises(CheckpointVersionError):
        model_from_checkpoint_bytes(b"NOTMLP" + data[6:])
    with pytest.raises(CheckpointVersionError):
        model_from_checkpoint_bytes(data[:6] + bytes([99]) + data[7:])
    with pytest.raises(CheckpointCorruptError):
        model_from_checkpoint_bytes(data[:-3])
    with pytest.raises(CheckpointCorruptError):
        model_from_checkpoint_bytes(data + b"\x00")
    with pytest.raises(CheckpointCorruptError):
        model_from_checkpoint_bytes(data[:3])


def _identity_model(size):
    return MlpModel([DenseLayer(np.eye(size), np.zeros(size), Activation.IDENTITY)])


def test_mlp_forward_layers():
    x = np.array([0.2, -0.4, 0.9])
    assert np.array_equal(mlp_forward(_identity_model(3), x), x)

    bias = np.array([0.5, -1.5])
    flat = MlpModel([DenseLayer(np.zeros((2, 3)), bias, Activation.IDENTITY)])
    assert np.array_equal(mlp_forward(flat, x), bias)

    model = MlpModel.initialize((3,), [5], 2, 0)
    hidden, out = model.layers
    expected = out.weight @ np.maximum(hidden.weight @ x + hidden.bias, 0.0) + out.bias
    assert np.allclose(mlp_forward(model, x), expected, rtol=1e-12, atol=0)


def test_identity_network_gradient_is_softmax_residual():
    x = np.array([0.3, 1.2, -0.5])
    loss, grad = _identity_model(3).loss_and_input_grad(x, 1)
    onehot = np.array([0.0, 1.0, 0.0])
    assert np.allclose(grad, softmax(x) - onehot, rtol=0, atol=1e-12)
    assert loss == pytest.approx(-np.log(softmax(x)[1]), rel=1e-12)


def test_ensemble_logits_are_linear_in_weights():
    a = MlpModel.initialize((4,), [6], 3, 1)
    b = MlpModel.initialize((4,), [6], 3, 2)
    x = np.array([0.1, 0.4, 0.6, 0.95])
    la, lb = mlp_forward(a, x), mlp_forward(b, x)
    assert np.allclose(ensemble_logits(EnsembleModel([a, b], [0.3, 0.7]), x), 0.3 * la + 0.7 * lb,
                       rtol=0, atol=1e-12)
    for lam in (0.0, 0.25, 0.5, 0.9):
        mixed = ensemble_logits(EnsembleModel([a, b], [lam, 1.0 - lam]), x)
        assert np.allclose(mixed, lam * la + (1.0 - lam) * lb, rtol=0, atol=1e-10), f"lambda {lam}"


def _fixed_logits(values):
    values = np.array(values, dtype=float)
    return FunctionOracle(lambda x: 0.0, lambda x: np.zeros_like(x), (1,), num_classes=values.size,
                          logits_fn=lambda x: values)


def test_predict_argmax_and_ties():
    x = np.zeros(1)
    assert predict(_fixed_logits([0.1, 2.0, -1.0]), x) == 1
    assert predict(_fixed_logits([1.0, 1.0]), x) == 0, "ties go to the lowest index"
    assert predict(_fixed_logits([0.1 + 50.0, 2.0 + 50.0, -1.0 + 50.0]), x) == 1
    assert softmax_cross_entropy(np.array([20.0, 0.0, 0.0]), 0)[0] < 1e-8


def test_zero_epochs_returns_unchanged_copy():
    model = MlpModel.initialize((2,), [3], 2, 0)
    trained = train_sgd(model, [LabeledExample(np.array([0.1, 0.2]), 0)], 0, 0.1, 0)
    assert trained == model and trained is not model


def test_training_fits_separable_blobs():
    data = generate_blobs(200, n_features=4, n_classes=2, separation=1.0, seed=3)
    model = train_sgd(MlpModel.initialize((4,), [8], 2, 3), data.examples(), epochs=50, lr=0.1, seed=3)
    train_acc = accuracy(model, data.examples())
    assert train_acc >= 0.95, f"training accuracy {train_acc}"


def test_training_divergence_names_the_epoch():
    model = MlpModel.initialize((2,), [], 2, 0)
    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(TrainingDivergedError) as info:
            train_sgd(model, [LabeledExample(np.array([np.inf, 0.0]), 0)], 3, 0.1, 0)
    assert info.value.epoch == 1
