"""Preprocessor-blind PGD in the l_inf and l_2 threat models.

Gradients flow through the classifier only; any purification stage placed in
front of the classifier at evaluation time is ignored by the attacker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neural import DataError, Mlp, backward, forward, softmax_cross_entropy


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8.0 / 255.0
    steps: int = 40
    step_size: float | None = None  # defaults to epsilon / 10
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"norm must be 'linf' or 'l2', got {self.norm!r}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")

    @property
    def alpha(self) -> float:
        return self.epsilon / 10.0 if self.step_size is None else self.step_size


def fgsm_config(epsilon: float, norm: str = "linf") -> AttackConfig:
    """Single full-size step, no random start."""
    return AttackConfig(norm=norm, epsilon=epsilon, steps=1, step_size=epsilon, random_start=False)


def loss_and_input_grad(classifier: Mlp, x, y):
    logits, tape = forward(classifier, x, return_tape=True)
    loss, g = softmax_cross_entropy(logits, y)
    # per-example gradients: undo the batch mean
    g = g * g.shape[0]
    return loss, backward(classifier, g, tape).input


def _row_norms(v):
    return np.sqrt(np.sum(v * v, axis=1, keepdims=True))


def project(x_adv, x, config: AttackConfig):
    """Project onto the epsilon ball around ``x``, then onto the box [-1, 1]."""
    delta = x_adv - x
    if config.norm == "linf":
        delta = np.clip(delta, -config.epsilon, config.epsilon)
    else:
        norms = _row_norms(delta)
        factor = np.minimum(1.0, config.epsilon / np.maximum(norms, 1e-300))
        delta = delta * factor
    # clipping towards a point of the box never increases the distance to x
    return np.clip(x + delta, -1.0, 1.0)


def _random_start(x, config: AttackConfig, rng):
    n, d = x.shape
    if config.norm == "linf":
        delta = rng.uniform(-config.epsilon, config.epsilon, size=x.shape)
    else:
        direction = rng.standard_normal(x.shape)
        direction /= np.maximum(_row_norms(direction), 1e-300)
        radius = config.epsilon * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / d)
        delta = direction * radius
    return project(x + delta, x, config)


def pgd_attack(classifier: Mlp, x, y, config: AttackConfig, rng=None):
    """Maximise cross-entropy of ``classifier`` inside the threat ball.

    ``x`` may be one example or a batch; ``y`` matches. ``rng`` defaults to a
    generator seeded with ``config.seed``.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    y2 = np.atleast_1d(np.asarray(y))
    if y2.shape != (x2.shape[0],):
        raise DataError(f"{y2.size} labels for {x2.shape[0]} inputs")
    if y2.min() < 0 or y2.max() >= classifier.output_dim:
        raise DataError(f"labels must lie in [0, {classifier.output_dim})")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    x_adv = _random_start(x2, config, rng) if config.random_start else x2.copy()
    for _ in range(config.steps):
        _, g = loss_and_input_grad(classifier, x_adv, y2)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite input gradient during PGD")
        if config.norm == "linf":
            step = np.sign(g)
        else:
            norms = _row_norms(g)
            step = np.where(norms > 0, g / np.maximum(norms, 1e-300), 0.0)
        x_adv = project(x_adv + config.alpha * step, x2, config)
    return x_adv[0] if squeeze else x_adv


def perturbation_norm(x_adv, x, norm: str):
    delta = np.atleast_2d(np.asarray(x_adv) - np.asarray(x))
    if norm == "linf":
        return np.max(np.abs(delta), axis=1)
    return np.sqrt(np.sum(delta * delta, axis=1))
