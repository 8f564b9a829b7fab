import json

import numpy as np
import pytest

from diffguard.data import make_gaussian_blobs
from diffguard.neural import (
    Mlp,
    ShapeError,
    StaleTapeError,
    DataError,
    TrainingError,
    accuracy,
    backward,
    forward,
    load_checkpoint,
    save_checkpoint,
    time_embedding,
    train_classifier,
    train_denoiser,
)
from diffguard.schedule import make_linear_schedule

from gradcheck import max_gradient_error


def scripted_forward(W1, b1, W2, b2, x):
    h = [np.tanh(sum(x[i] * W1[i, j] for i in range(len(x))) + b1[j]) for j in range(W1.shape[1])]
    return np.array([sum(h[j] * W2[j, k] for j in range(len(h))) + b2[k] for k in range(W2.shape[1])])


def test_zero_network_outputs_zero():
    m = Mlp.zeros_like(Mlp.init([5, 7, 3], seed=0))
    assert np.all(forward(m, np.ones(5)) == 0.0)


def test_single_linear_layer():
    W = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]])
    m = Mlp([3, 2], [W], [np.zeros(2)])
    x = np.array([0.2, -0.4, 1.0])
    np.testing.assert_array_equal(forward(m, x), x @ W)


def test_two_layer_forward_matches_scripted_oracle():
    m = Mlp.init([4, 6, 3], seed=11)
    rng = np.random.default_rng(5)
    m.biases[0][:] = rng.normal(size=6)
    m.biases[1][:] = rng.normal(size=3)
    x = rng.uniform(-1, 1, size=4)
    ref = scripted_forward(m.weights[0], m.biases[0], m.weights[1], m.biases[1], x)
    np.testing.assert_allclose(forward(m, x), ref, atol=1e-12, rtol=0)


def test_forward_is_pure():
    m = Mlp.init([4, 8, 4], time_embedding_dim=8, time_scale=100, seed=1)
    x = np.random.default_rng(0).normal(size=(3, 4))
    a = forward(m, x, 7)
    b = forward(m, x, 7)
    assert a.tobytes() == b.tobytes()


def test_shape_errors():
    m = Mlp.init([4, 8, 2], seed=1)
    with pytest.raises(ShapeError, match=r"\(3,\)"):
        forward(m, np.zeros(3))
    d = Mlp.init([4, 8, 4], time_embedding_dim=8, seed=1)
    with pytest.raises(ShapeError):
        forward(d, np.zeros(4))


def test_time_embedding_shape_and_range():
    e = time_embedding(np.array([1, 50, 100]), 8, 100.0)
    assert e.shape == (3, 8)
    assert np.all(np.abs(e) <= 1.0)


def test_zero_loss_grad_gives_zero_gradients():
    m = Mlp.init([3, 5, 2], seed=2)
    _, tape = forward(m, np.ones((4, 3)), return_tape=True)
    g = backward(m, np.zeros((4, 2)), tape)
    assert all(np.all(w == 0) for w in g.weights) and np.all(g.input == 0)


def test_scalar_tanh_derivative():
    # f(x) = tanh(w x) as a one-hidden-unit net with identity readout
    w, x = 0.7, 1.3
    m = Mlp([1, 1, 1], [np.array([[w]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
    _, tape = forward(m, np.array([x]), return_tape=True)
    g = backward(m, np.array([1.0]), tape)
    assert g.weights[0][0, 0] == pytest.approx(x * (1 - np.tanh(w * x) ** 2), abs=1e-12)
    assert g.input[0] == pytest.approx(w * (1 - np.tanh(w * x) ** 2), abs=1e-12)


def test_random_three_layer_gradients_match_finite_differences():
    assert max_gradient_error(20, seed=123) < 1e-5


def test_stale_tape_rejected():
    m = Mlp.init([3, 4, 2], seed=0)
    _, tape = forward(m, np.ones(3), return_tape=True)
    g = backward(m, np.ones(2), tape)
    m.apply_update(g, 0.1)
    with pytest.raises(StaleTapeError):
        backward(m, np.ones(2), tape)


def test_denoiser_zero_epochs_leaves_model_unchanged():
    m = Mlp.init([2, 8, 2], time_embedding_dim=4, time_scale=50, seed=0)
    before = [p.copy() for p in m.parameters()]
    rep = train_denoiser(m, np.zeros((5, 2)), make_linear_schedule(50), 0, 0.1, seed=1)
    assert rep.loss_curve == [] and rep.epochs == 0
    assert all(np.array_equal(a, b) for a, b in zip(before, m.parameters()))


def test_denoiser_fits_single_point():
    sched = make_linear_schedule(50, 1e-3, 0.2)
    m = Mlp.init([2, 64, 64, 2], time_embedding_dim=8, time_scale=50, seed=0)
    rep = train_denoiser(m, np.full((64, 2), 0.5), sched, epochs=1000, lr=0.1, seed=3, batch_size=64)
    assert rep.final_loss < 0.05


def test_denoiser_training_is_deterministic():
    sched = make_linear_schedule(20)
    curves = []
    for _ in range(2):
        m = Mlp.init([2, 8, 2], time_embedding_dim=4, time_scale=20, seed=0)
        curves.append(train_denoiser(m, np.random.default_rng(0).uniform(-1, 1, (30, 2)), sched, 5, 0.05, seed=9).loss_curve)
    assert curves[0] == curves[1]


def test_denoiser_errors():
    m = Mlp.init([2, 4, 2], time_embedding_dim=4, seed=0)
    with pytest.raises(TrainingError):
        train_denoiser(m, np.zeros((0, 2)), make_linear_schedule(10), 1, 0.1, seed=0)
    with pytest.raises(TrainingError):
        train_denoiser(m, np.full((4, 2), np.nan), make_linear_schedule(10), 3, 0.1, seed=0)


def test_classifier_separable_blobs():
    ds = make_gaussian_blobs(200, 2, 2, 0.8, seed=7)
    m = Mlp.init([2, 16, 2], seed=0)
    train_classifier(m, ds.inputs, ds.labels, epochs=20, lr=0.1, seed=1)
    assert accuracy(m, ds.inputs, ds.labels) >= 0.99


def test_classifier_zero_epochs_unchanged():
    m = Mlp.init([2, 4, 2], seed=0)
    before = [p.copy() for p in m.parameters()]
    train_classifier(m, np.zeros((3, 2)), np.array([0, 1, 0]), 0, 0.1, seed=0)
    assert all(np.array_equal(a, b) for a, b in zip(before, m.parameters()))


def test_classifier_random_labels_chance_accuracy():
    ds = make_gaussian_blobs(300, 4, 2, 0.8, seed=3)
    labels = np.random.default_rng(0).integers(0, 4, size=len(ds))
    m = Mlp.init([2, 16, 4], seed=0)
    train_classifier(m, ds.inputs, labels, epochs=10, lr=0.05, seed=1)
    fresh = make_gaussian_blobs(300, 4, 2, 0.8, seed=4)
    fresh_labels = np.random.default_rng(1).integers(0, 4, size=len(fresh))
    assert abs(accuracy(m, fresh.inputs, fresh_labels) - 0.25) <= 0.1


def test_classifier_label_out_of_range():
    m = Mlp.init([2, 4, 3], seed=0)
    with pytest.raises(DataError):
        train_classifier(m, np.zeros((2, 2)), np.array([0, 3]), 1, 0.1, seed=0)


def test_classifier_loss_monotone_at_small_lr():
    ds = make_gaussian_blobs(100, 3, 2, 0.7, seed=2)
    m = Mlp.init([2, 16, 3], seed=0)
    rep = train_classifier(m, ds.inputs, ds.labels, epochs=40, lr=0.02, seed=1)
    assert np.all(np.diff(rep.loss_curve) <= 1e-3)


def test_checkpoint_round_trip(tmp_path):
    m = Mlp.init([4, 6, 4], time_embedding_dim=8, time_scale=1000, seed=3)
    path = tmp_path / "checkpoint.json"
    save_checkpoint(m, path, training_seed=42)
    doc = json.loads(path.read_text())
    assert {"schema_version", "layer_dims", "time_embedding_dim", "weights", "training_seed"} <= set(doc)
    back = load_checkpoint(path)
    x = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_allclose(forward(back, x, 17), forward(m, x, 17), atol=1e-15, rtol=0)
