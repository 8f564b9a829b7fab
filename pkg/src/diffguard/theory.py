"""Closed forms and Monte-Carlo oracles for the (epsilon, delta) robustness analysis.

After diffusing for T steps, a clean input and an input shifted by ``dx``
become ``p = N(sqrt(abar_T) x, (1 - abar_T) I)`` and
``q = N(sqrt(abar_T) (x + dx), (1 - abar_T) I)``: two isotropic Gaussians with
mean gap ``m = sqrt(abar_T) |dx|`` and common scale ``sigma = sqrt(1 - abar_T)``.
Everything here reduces to that one-dimensional picture. Divergences after the
learned reverse process are not estimated; by data processing they are bounded
by the forward-marginal values computed here.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .normal import norm_cdf, norm_ppf

METHODS = ("paper_bound", "gaussian_exact", "monte_carlo")


@dataclass
class RobustnessBound:
    epsilon: float
    r: float
    alpha_bar_T: float
    delta: float
    method: str
    mc_ci: tuple | None = None


def _check_alpha_bar(alpha_bar_T):
    if not 0.0 < alpha_bar_T < 1.0:
        raise ValueError(f"alpha_bar_T must lie strictly inside (0, 1), got {alpha_bar_T}")


def delta_paper_bound(epsilon: float, r: float, alpha_bar_T: float) -> float:
    """Closed-form escape probability Phi(r sqrt(abar) / (2 (1 - abar)) - eps / (r sqrt(abar))).

    Note: this is not an upper bound on :func:`delta_gaussian_exact` in general;
    see :func:`bad_event_probability`.
    """
    return norm_cdf(paper_bound_argument(epsilon, r, alpha_bar_T))


def paper_bound_argument(epsilon: float, r: float, alpha_bar_T: float) -> float:
    """Standardized argument of :func:`delta_paper_bound`; finite even where the bound saturates."""
    if r <= 0:
        raise ValueError(f"r must be > 0, got {r}")
    _check_alpha_bar(alpha_bar_T)
    sa = np.sqrt(alpha_bar_T)
    return float(r * sa / (2.0 * (1.0 - alpha_bar_T)) - epsilon / (r * sa))


def _check_gap(mean_gap, sigma):
    if mean_gap <= 0:
        raise ValueError(f"mean_gap must be > 0, got {mean_gap}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")


def bad_event_probability(epsilon: float, mean_gap: float, sigma: float) -> float:
    """Q(S) for S = {q >= e^eps p}: Phi(m / (2 sigma) - eps sigma / m).

    This always dominates the exact hockey-stick value. It coincides with
    :func:`delta_paper_bound` only when ``sigma = 1``.
    """
    _check_gap(mean_gap, sigma)
    return norm_cdf(mean_gap / (2.0 * sigma) - epsilon * sigma / mean_gap)


def delta_gaussian_exact(epsilon: float, mean_gap: float, sigma: float) -> float:
    """sup_S Q(S) - e^eps P(S) for two isotropic Gaussians with gap ``m`` and scale ``sigma``."""
    _check_gap(mean_gap, sigma)
    u = mean_gap / (2.0 * sigma)
    v = epsilon * sigma / mean_gap
    val = norm_cdf(u - v) - np.exp(epsilon) * norm_cdf(-u - v)
    return float(min(max(val, 0.0), 1.0))


def delta_gaussian_exact_complement(epsilon: float, mean_gap: float, sigma: float) -> float:
    """``1 - delta_gaussian_exact`` from the two lower tails, so values near 1 stay resolvable."""
    _check_gap(mean_gap, sigma)
    u = mean_gap / (2.0 * sigma)
    v = epsilon * sigma / mean_gap
    val = norm_cdf(v - u) + np.exp(epsilon) * norm_cdf(-u - v)
    return float(min(max(val, 0.0), 1.0))


def monte_carlo_delta(epsilon: float, mean_gap: float, sigma: float, d: int = 1,
                      n_samples: int = 1_000_000, rng=None, confidence: float = 0.99,
                      chunk: int = 250_000):
    """Two-sample estimate of Q(S) - e^eps P(S) with a normal-approximation CI.

    Membership in S is decided from the full d-dimensional log density ratio;
    the gap points along a random unit direction. Returns ``(estimate, (lo, hi))``.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if n_samples < 1000:
        raise ValueError(f"n_samples must be >= 1000, got {n_samples}")
    _check_gap(mean_gap, sigma)
    rng = np.random.default_rng() if rng is None else rng
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    gap = mean_gap * direction
    gap_sq = mean_gap * mean_gap

    def in_s(x):
        log_ratio = (2.0 * x @ gap - gap_sq) / (2.0 * sigma * sigma)
        return log_ratio >= epsilon

    hits_q = hits_p = 0
    done = 0
    while done < n_samples:
        b = min(chunk, n_samples - done)
        xq = gap + sigma * rng.standard_normal((b, d))
        xp = sigma * rng.standard_normal((b, d))
        hits_q += int(np.count_nonzero(in_s(xq)))
        hits_p += int(np.count_nonzero(in_s(xp)))
        done += b
    q_hat = hits_q / n_samples
    p_hat = hits_p / n_samples
    w = np.exp(epsilon)
    est = q_hat - w * p_hat
    se = np.sqrt((q_hat * (1.0 - q_hat) + w * w * p_hat * (1.0 - p_hat)) / n_samples)
    z = norm_ppf(0.5 + confidence / 2.0)
    return float(est), (float(est - z * se), float(est + z * se))


def delta_monotonicity_profile(schedule, epsilon: float, r: float) -> np.ndarray:
    """Rows ``(t, delta_t, 1 - delta_t)`` of the exact escape probability after t forward steps.

    The complement column is computed from lower tails; at small t the escape
    probability itself rounds to 1 in double precision.
    """
    t = np.arange(1, schedule.total_steps + 1)
    ab = schedule.alpha_bar(t)
    rows = []
    for a in ab:
        if r > 0:
            m, s = r * np.sqrt(a), np.sqrt(1.0 - a)
            rows.append((delta_gaussian_exact(epsilon, m, s), delta_gaussian_exact_complement(epsilon, m, s)))
        else:
            rows.append((0.0, 1.0))
    return np.column_stack([t, np.array(rows)])


def is_strictly_decreasing(deltas, floor: float = 1e-12, complements=None) -> bool:
    """Strict decrease wherever the earlier value exceeds ``floor``; plateaus below it pass.

    With ``complements`` (values of ``1 - delta``), pairs with both values at
    or above 1/2 are compared on the complement, which must strictly increase.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    prev, nxt = deltas[:-1], deltas[1:]
    live = prev > floor
    ok = np.where(live, nxt < prev, nxt <= floor)
    if complements is not None:
        comp = np.asarray(complements, dtype=np.float64)
        upper = (prev >= 0.5) & (nxt >= 0.5)
        ok = np.where(upper, comp[1:] > comp[:-1], ok)
    return bool(np.all(ok))


def kl_forward_gap(schedule, t: int, delta_x_norm: float) -> float:
    """KL between the step-t marginals of x and x + dx: abar |dx|^2 / (2 (1 - abar))."""
    if not 1 <= t <= schedule.total_steps:
        raise ValueError(f"t={t} outside [1, {schedule.total_steps}]")
    if delta_x_norm < 0:
        raise ValueError(f"delta_x_norm must be >= 0, got {delta_x_norm}")
    ab = float(schedule.alpha_bar(t))
    return ab * delta_x_norm**2 / (2.0 * (1.0 - ab))


def monte_carlo_kl(schedule, t: int, delta_x_norm: float, n_samples: int, rng):
    """Sample-mean estimate of E_p[log p / q] and its standard error."""
    ab = float(schedule.alpha_bar(t))
    sigma = np.sqrt(1.0 - ab)
    gap = np.sqrt(ab) * delta_x_norm
    x = sigma * rng.standard_normal(n_samples)  # p centred at 0, q at gap
    log_ratio = ((x - gap) ** 2 - x * x) / (2.0 * sigma * sigma)
    return float(log_ratio.mean()), float(log_ratio.std(ddof=1) / np.sqrt(n_samples))


def robustness_bound(epsilon, r, alpha_bar_T, method="paper_bound", n_samples=1_000_000, rng=None):
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    _check_alpha_bar(alpha_bar_T)
    m, s = r * np.sqrt(alpha_bar_T), np.sqrt(1.0 - alpha_bar_T)
    if method == "paper_bound":
        return RobustnessBound(epsilon, r, alpha_bar_T, delta_paper_bound(epsilon, r, alpha_bar_T), method)
    if method == "gaussian_exact":
        return RobustnessBound(epsilon, r, alpha_bar_T, delta_gaussian_exact(epsilon, m, s), method)
    est, ci = monte_carlo_delta(epsilon, m, s, n_samples=n_samples, rng=rng)
    return RobustnessBound(epsilon, r, alpha_bar_T, min(max(est, 0.0), 1.0), method, ci)


DEFAULT_EPSILONS = (0.1, 0.25, 0.5, 1.0, 2.0)
DEFAULT_RADII = (0.25, 0.5, 0.75, 1.0)
DEFAULT_ALPHA_BARS = (0.1, 0.3, 0.5, 0.65, 0.9)


def bound_grid(epsilons=DEFAULT_EPSILONS, radii=DEFAULT_RADII, alpha_bars=DEFAULT_ALPHA_BARS):
    """Cartesian product; the defaults give 5 x 4 x 5 = 100 points."""
    return list(product(epsilons, radii, alpha_bars))


def bound_sweep(grid, n_samples=1_000_000, seed=0, d=1):
    """One dict per grid point with every delta variant and the dominance flags."""
    rows = []
    for k, (eps, r, ab) in enumerate(grid):
        m, s = r * np.sqrt(ab), np.sqrt(1.0 - ab)
        paper = delta_paper_bound(eps, r, ab)
        exact = delta_gaussian_exact(eps, m, s)
        bad = bad_event_probability(eps, m, s)
        est, (lo, hi) = monte_carlo_delta(eps, m, s, d, n_samples, np.random.default_rng([seed, k]))
        rows.append({
            "epsilon": eps, "r": r, "alpha_bar_T": ab,
            "paper_bound": paper, "exact": exact, "bad_event_prob": bad,
            "mc_estimate": est, "ci_lo": lo, "ci_hi": hi,
            "paper_ge_exact": paper >= exact,
            "exact_ge_ci_lo": exact >= lo,
            "ci_hi_ge_exact": hi >= exact,
        })
    return rows
