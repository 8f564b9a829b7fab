"""Randomized-smoothing certification of the unguided purification pipeline.

The base randomized algorithm is ``A(x) = classify(unguided_purify(x))``; its
forward-noising stage is Gaussian smoothing with scale ``sqrt(1 - abar_T)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .diffusion import PurifyConfig, unguided_purify
from .neural import predict_labels
from .normal import norm_ppf

ABSTAIN = -1


@dataclass
class SmoothedPipeline:
    denoiser: object
    classifier: object
    schedule: object
    config: PurifyConfig
    num_classes: int | None = None
    batch_size: int = 1000
    noise_scale: float = field(init=False)

    def __post_init__(self):
        if self.config.guided:
            self.config = replace(self.config, guided=False)
        self._respaced = self.config.sampling_schedule(self.schedule)
        self.noise_scale = float(np.sqrt(1.0 - self.schedule.alpha_bar(self.config.T)))
        if self.num_classes is None:
            self.num_classes = self.classifier.output_dim

    def evaluate(self, x_batch, rng) -> np.ndarray:
        """One draw of A(x) per row."""
        purified = unguided_purify(self.denoiser, self._respaced, x_batch, self.config, rng)
        return predict_labels(self.classifier, purified)


@dataclass
class CertificationResult:
    prediction: int
    radius: float
    pA_lower: float
    counts0: np.ndarray
    counts: int
    n0: int
    n: int
    alpha: float

    @property
    def abstained(self) -> bool:
        return self.prediction == ABSTAIN


def sample_pipeline(pipeline, x, n: int, rng) -> np.ndarray:
    """Class histogram of ``n`` independent draws of the pipeline at ``x``.

    ``pipeline`` is a :class:`SmoothedPipeline` or any object with
    ``evaluate(batch, rng)`` and ``num_classes``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    x = np.asarray(x, dtype=np.float64)
    counts = np.zeros(pipeline.num_classes, dtype=np.int64)
    batch = getattr(pipeline, "batch_size", n)
    done = 0
    while done < n:
        b = min(batch, n - done)
        labels = np.asarray(pipeline.evaluate(np.broadcast_to(x, (b, x.size)).copy(), rng))
        counts += np.bincount(labels, minlength=pipeline.num_classes)
        done += b
    return counts


def clopper_pearson_lower(k: int, n: int, alpha: float) -> float:
    """One-sided (1 - alpha) lower confidence bound on a binomial proportion."""
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if k == 0:
        return 0.0
    return float(stats.beta.ppf(alpha, k, n - k + 1))


def certified_radius(noise_scale: float, pA_lower: float, pB_upper: float | None = None) -> float:
    """``noise_scale / 2 * (Phi^-1(pA) - Phi^-1(pB))``; ``pB`` defaults to ``1 - pA``."""
    if pB_upper is None:
        pB_upper = 1.0 - pA_lower
    return 0.5 * noise_scale * (norm_ppf(pA_lower) - norm_ppf(pB_upper))


def certify(pipeline, x, n0: int, n: int, alpha: float, rng) -> CertificationResult:
    if n0 < 1 or n < 1:
        raise ValueError(f"n0 and n must be >= 1, got n0={n0}, n={n}")
    counts0 = sample_pipeline(pipeline, x, n0, rng)
    c_hat = int(np.argmax(counts0))  # argmax keeps the lowest index on ties
    counts = sample_pipeline(pipeline, x, n, rng)
    n_a = int(counts[c_hat])
    p_lower = clopper_pearson_lower(n_a, n, alpha)
    if p_lower <= 0.5:
        return CertificationResult(ABSTAIN, 0.0, p_lower, counts0, n_a, n0, n, alpha)
    radius = pipeline.noise_scale * norm_ppf(p_lower)
    return CertificationResult(c_hat, float(radius), p_lower, counts0, n_a, n0, n, alpha)


def predict_from_counts(counts, alpha: float) -> int:
    counts = np.asarray(counts)
    order = np.argsort(-counts, kind="stable")
    n_a = int(counts[order[0]])
    n_b = int(counts[order[1]]) if counts.size > 1 else 0
    if n_a + n_b == 0:
        return ABSTAIN
    if stats.binomtest(n_a, n_a + n_b, 0.5).pvalue > alpha:
        return ABSTAIN
    return int(order[0])


def predict_smoothed(pipeline, x, n: int, alpha: float, rng) -> int:
    """Top-class prediction with a two-sided binomial test on the top two counts."""
    return predict_from_counts(sample_pipeline(pipeline, x, n, rng), alpha)


@dataclass
class ProbeResult:
    flips: int
    directions: int
    radius: float
    predictions: np.ndarray


def soundness_probe(pipeline, x, result: CertificationResult, directions: int, draws: int,
                    fraction: float, rng) -> ProbeResult | None:
    """Re-estimate the smoothed prediction at ``fraction * R`` along random l2 directions.

    Each probe point takes the argmax of ``draws`` pipeline samples. Returns
    ``None`` for abstained results, which certify nothing.
    """
    if result.abstained:
        return None
    x = np.asarray(x, dtype=np.float64).ravel()
    dirs = rng.standard_normal((directions, x.size))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    step = fraction * result.radius
    preds = np.array([
        int(np.argmax(sample_pipeline(pipeline, x + step * u, draws, rng))) for u in dirs
    ])
    return ProbeResult(int(np.sum(preds != result.prediction)), directions, step, preds)
