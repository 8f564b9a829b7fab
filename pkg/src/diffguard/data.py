"""Deterministic synthetic datasets, all mapped into [-1, 1]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class Dataset:
    name: str
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    seed: int

    def __len__(self):
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.name, self.inputs[idx], self.labels[idx], self.num_classes, self.seed)


def blob_means(num_classes: int, d: int, separation: float) -> np.ndarray:
    """Class means evenly spaced on a circle of radius ``separation`` in the first two coordinates."""
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, d))
    means[:, 0] = separation * np.cos(angles)
    means[:, 1] = separation * np.sin(angles)
    return means


def make_gaussian_blobs(n_per_class: int, num_classes: int, d: int, separation: float,
                        seed: int, noise_sigma: float = 0.1) -> Dataset:
    if d < 2:
        raise ValueError(f"d must be at least 2, got {d}")
    if separation < 0:
        raise ValueError(f"separation must be non-negative, got {separation}")
    if num_classes < 2 or n_per_class < 1:
        raise ValueError("need at least two classes and one example per class")
    rng = np.random.default_rng(seed)
    means = blob_means(num_classes, d, separation)
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = means[labels] + noise_sigma * rng.standard_normal((labels.size, d))
    return Dataset("blobs", np.clip(x, -1.0, 1.0), labels, num_classes, seed)


def make_two_moons(n: int, noise_sigma: float, seed: int) -> Dataset:
    """Two interleaved half circles, affinely mapped so the noiseless curves fill [-1, 1]^2.

    Raw curves: ``(cos a, sin a)`` and ``(1 - cos a, 0.5 - sin a)`` for ``a`` in
    ``[0, pi]``; the map is ``x -> (x - 0.5) / 1.5``, ``y -> (y - 0.25) / 0.75``.
    """
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    a0 = np.linspace(0.0, np.pi, n0)
    a1 = np.linspace(0.0, np.pi, n1)
    raw = np.concatenate([
        np.stack([np.cos(a0), np.sin(a0)], axis=1),
        np.stack([1.0 - np.cos(a1), 0.5 - np.sin(a1)], axis=1),
    ])
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    raw = raw + noise_sigma * rng.standard_normal(raw.shape)
    mapped = np.empty_like(raw)
    mapped[:, 0] = (raw[:, 0] - 0.5) / 1.5
    mapped[:, 1] = (raw[:, 1] - 0.25) / 0.75
    return Dataset("moons", np.clip(mapped, -1.0, 1.0), labels, 2, seed)


_GLYPHS = [
    # 0: ring
    [
        "..####..",
        ".##..##.",
        ".#....#.",
        ".#....#.",
        ".#....#.",
        ".#....#.",
        ".##..##.",
        "..####..",
    ],
    # 1: vertical stroke with foot
    [
        "...##...",
        "..###...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "..####..",
    ],
    # 2: diagonal cross
    [
        "##....##",
        ".##..##.",
        "..####..",
        "...##...",
        "...##...",
        "..####..",
        ".##..##.",
        "##....##",
    ],
    # 3: T-shape
    [
        "########",
        "########",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
    ],
]

DIGITS8_TEMPLATES = np.array(
    [[1.0 if ch == "#" else -1.0 for row in glyph for ch in row] for glyph in _GLYPHS]
)
DIGITS8_TEMPLATES.setflags(write=False)


def make_digits8(n_per_class: int, seed: int, noise_sigma: float = 0.15) -> Dataset:
    """Four fixed 8x8 glyphs (pixels +-1) with Gaussian jitter, flattened to 64 dims."""
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be positive, got {n_per_class}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(4), n_per_class)
    x = DIGITS8_TEMPLATES[labels] + noise_sigma * rng.standard_normal((labels.size, 64))
    return Dataset("digits8", np.clip(x, -1.0, 1.0), labels, 4, seed)


def nearest_template(x) -> np.ndarray:
    x = np.atleast_2d(x)
    d2 = ((x[:, None, :] - DIGITS8_TEMPLATES[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


GENERATORS = {
    "blobs": make_gaussian_blobs,
    "moons": make_two_moons,
    "digits8": make_digits8,
}
