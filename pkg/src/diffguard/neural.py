"""Small tanh MLPs with hand-written reverse-mode gradients.

Tensors are plain float64 numpy arrays. Batches are row-major ``(n, d)``;
a 1-D input is treated as a batch of one and the output is squeezed back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_SCHEMA_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class DataError(ValueError):
    pass


class StaleTapeError(RuntimeError):
    """A tape was used after the model's parameters changed."""


def time_embedding(t, dim: int, time_scale: float) -> np.ndarray:
    """Sinusoidal features of ``u = t / time_scale``.

    Feature pairs are ``sin(pi 2^k u), cos(pi 2^k u)`` for ``k = 0 .. dim/2 - 1``.
    Returns an array of shape ``(len(t), dim)``.
    """
    if dim % 2:
        raise ShapeError(f"time embedding dimension must be even, got {dim}")
    u = np.atleast_1d(np.asarray(t, dtype=np.float64)) / time_scale
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    angles = u[:, None] * freqs[None, :]
    out = np.empty((u.size, dim))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


class Mlp:
    """Dense network: tanh on every hidden layer, affine output layer.

    ``layer_dims[0]`` is the data dimension; when ``time_embedding_dim > 0``
    the first weight matrix also consumes the time features, so its shape is
    ``(layer_dims[0] + time_embedding_dim, layer_dims[1])``.
    """

    def __init__(self, layer_dims, weights, biases, time_embedding_dim=0, time_scale=1.0):
        self.layer_dims = [int(d) for d in layer_dims]
        self.time_embedding_dim = int(time_embedding_dim)
        self.time_scale = float(time_scale)
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.version = 0
        expected_in = [self.layer_dims[0] + self.time_embedding_dim] + self.layer_dims[1:-1]
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("need exactly one weight/bias pair per layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (expected_in[k], self.layer_dims[k + 1])
            if w.shape != want or b.shape != (want[1],):
                raise ShapeError(
                    f"layer {k}: weight {w.shape} / bias {b.shape}, expected {want} / {(want[1],)}"
                )

    @classmethod
    def init(cls, layer_dims, time_embedding_dim=0, time_scale=1.0, seed=0) -> "Mlp":
        rng = np.random.default_rng(seed)
        dims_in = [layer_dims[0] + time_embedding_dim] + list(layer_dims[1:-1])
        weights, biases = [], []
        for fan_in, fan_out in zip(dims_in, layer_dims[1:]):
            weights.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
            biases.append(np.zeros(fan_out))
        return cls(layer_dims, weights, biases, time_embedding_dim, time_scale)

    @classmethod
    def zeros_like(cls, other: "Mlp") -> "Mlp":
        return cls(
            other.layer_dims,
            [np.zeros_like(w) for w in other.weights],
            [np.zeros_like(b) for b in other.biases],
            other.time_embedding_dim,
            other.time_scale,
        )

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.layer_dims, self.weights, self.biases, self.time_embedding_dim, self.time_scale)

    def apply_update(self, grads: "Gradients", lr: float) -> None:
        for w, b, gw, gb in zip(self.weights, self.biases, grads.weights, grads.biases):
            w -= lr * gw
            b -= lr * gb
        self.version += 1

    def __call__(self, x, t=None):
        return forward(self, x, t)


@dataclass
class Tape:
    model_id: int
    version: int
    activations: list  # inputs to each layer, including the concatenated first input
    squeeze: bool


@dataclass
class Gradients:
    weights: list
    biases: list
    input: np.ndarray


def _prepare_input(model: Mlp, x, t):
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != model.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match model input dim {model.input_dim}")
    if model.time_embedding_dim > 0:
        if t is None:
            raise ShapeError("this model is time-conditioned; a step index t is required")
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if t_arr.size == 1:
            t_arr = np.full(x2.shape[0], t_arr[0])
        if t_arr.shape != (x2.shape[0],):
            raise ShapeError(f"step indices of shape {t_arr.shape} do not match batch of {x2.shape[0]}")
        emb = time_embedding(t_arr, model.time_embedding_dim, model.time_scale)
        x2 = np.concatenate([x2, emb], axis=1)
    elif t is not None:
        raise ShapeError("model has no time embedding but t was given")
    return x2, squeeze


def forward(model: Mlp, x, t=None, return_tape: bool = False):
    """Evaluate the network; optionally return the tape needed by :func:`backward`."""
    h, squeeze = _prepare_input(model, x, t)
    acts = [h]
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if k == last else np.tanh(z)
        if k != last:
            acts.append(h)
    out = h[0] if squeeze else h
    if return_tape:
        return out, Tape(id(model), model.version, acts, squeeze)
    return out


def backward(model: Mlp, loss_grad, tape: Tape) -> Gradients:
    """Reverse-mode pass given dLoss/dOutput.

    The input gradient covers data coordinates only (time features are not
    differentiable inputs).
    """
    if tape.model_id != id(model) or tape.version != model.version:
        raise StaleTapeError("tape does not belong to the current model parameters; rerun forward")
    g = np.asarray(loss_grad, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    n = tape.activations[0].shape[0]
    if g.shape != (n, model.output_dim):
        raise ShapeError(f"loss gradient shape {g.shape} does not match output ({n}, {model.output_dim})")
    n_layers = len(model.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        a_in = tape.activations[k]
        gw[k] = a_in.T @ g
        gb[k] = g.sum(axis=0)
        g = g @ model.weights[k].T
        if k > 0:
            # a_in = tanh(z_{k-1})
            g = g * (1.0 - a_in * a_in)
    dx = g[:, : model.input_dim]
    if tape.squeeze:
        dx = dx[0]
    return Gradients(gw, gb, dx)


@dataclass
class TrainReport:
    epochs: int
    final_loss: float
    loss_curve: list
    seed: int


def _check_finite(value, what):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {what}: {value}")


def train_denoiser(model: Mlp, data, schedule, epochs: int, lr: float, seed: int, batch_size: int = 64) -> TrainReport:
    """Fit an epsilon-predictor by SGD on the unweighted noise MSE.

    Loss per batch is the mean over examples and coordinates of
    ``(eps - eps_theta(sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, t))**2`` with ``t``
    uniform on ``1..T``.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise TrainingError("empty dataset")
    if model.time_embedding_dim == 0:
        raise TrainingError("denoiser must be time-conditioned")
    rng = np.random.default_rng(seed)
    T = schedule.total_steps
    n, d = data.shape
    curve = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, batch_size):
            x0 = data[order[start : start + batch_size]]
            b = x0.shape[0]
            t = rng.integers(1, T + 1, size=b)
            eps = rng.standard_normal(x0.shape)
            ab = schedule.alpha_bar(t)[:, None]
            xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
            pred, tape = forward(model, xt, t, return_tape=True)
            resid = pred - eps
            loss = float(np.mean(resid * resid))
            _check_finite(loss, "denoiser loss")
            model.apply_update(backward(model, 2.0 * resid / resid.size, tape), lr)
            total += loss * b
            count += b
        curve.append(total / count)
    return TrainReport(epochs, curve[-1] if curve else float("nan"), curve, seed)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.atleast_2d(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def train_classifier(model: Mlp, inputs, labels, epochs: int, lr: float, seed: int, batch_size: int = 32) -> TrainReport:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    labels = np.asarray(labels)
    if inputs.shape[0] == 0:
        raise TrainingError("empty dataset")
    if labels.shape != (inputs.shape[0],):
        raise DataError(f"{labels.shape[0]} labels for {inputs.shape[0]} inputs")
    if labels.size and (labels.min() < 0 or labels.max() >= model.output_dim):
        raise DataError(f"labels must lie in [0, {model.output_dim}); got range [{labels.min()}, {labels.max()}]")
    rng = np.random.default_rng(seed)
    n = inputs.shape[0]
    curve = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            logits, tape = forward(model, inputs[idx], return_tape=True)
            loss, g = softmax_cross_entropy(logits, labels[idx])
            _check_finite(loss, "classifier loss")
            model.apply_update(backward(model, g, tape), lr)
            total += loss * idx.size
        curve.append(total / n)
    return TrainReport(epochs, curve[-1] if curve else float("nan"), curve, seed)


def predict_labels(model: Mlp, x) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest index."""
    return np.argmax(np.atleast_2d(forward(model, x)), axis=1)


def accuracy(model: Mlp, inputs, labels) -> float:
    return float(np.mean(predict_labels(model, inputs) == np.asarray(labels)))


def save_checkpoint(model: Mlp, path, training_seed=None) -> None:
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "layer_dims": model.layer_dims,
        "time_embedding_dim": model.time_embedding_dim,
        "time_scale": model.time_scale,
        "weights": [{"W": w.tolist(), "b": b.tolist()} for w, b in zip(model.weights, model.biases)],
        "training_seed": training_seed,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> Mlp:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise DataError(f"unsupported checkpoint schema_version {doc.get('schema_version')!r}")
    return Mlp(
        doc["layer_dims"],
        [layer["W"] for layer in doc["weights"]],
        [layer["b"] for layer in doc["weights"]],
        doc["time_embedding_dim"],
        doc.get("time_scale", 1.0),
    )
