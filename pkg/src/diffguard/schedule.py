"""Noise schedules for discrete-time diffusion.

Storage convention: ``betas[k]`` holds the value for domain step ``t = k + 1``.
The accessor :meth:`NoiseSchedule.alpha_bar` takes the 1-based step index
directly and defines ``alpha_bar(0) = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Invalid schedule parameters or step indices."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    _abar_ext: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError("betas must be a non-empty 1-D array")
        betas.setflags(write=False)
        alphas = 1.0 - betas
        alphas.setflags(write=False)
        # running product in extended precision, rounded once at the end
        abar = np.cumprod(1.0 - betas.astype(np.longdouble)).astype(np.float64)
        abar.setflags(write=False)
        ext = np.concatenate([[1.0], abar])
        ext.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", abar)
        object.__setattr__(self, "_abar_ext", ext)

    @classmethod
    def from_betas(cls, betas, check: bool = True) -> "NoiseSchedule":
        """Build a schedule from explicit betas.

        ``check=False`` skips the ``0 < beta < 1`` validation; it exists so tests
        can build degenerate schedules (e.g. ``alpha_bar = 1``).
        """
        betas = np.asarray(betas, dtype=np.float64)
        if check and (np.any(betas <= 0.0) or np.any(betas >= 1.0)):
            raise ScheduleError("every beta must lie strictly inside (0, 1)")
        return cls(betas)

    @property
    def total_steps(self) -> int:
        return int(self.betas.size)

    def _check_step(self, t, allow_zero=True):
        t_arr = np.asarray(t)
        lo = 0 if allow_zero else 1
        if np.any(t_arr < lo) or np.any(t_arr > self.total_steps):
            raise ScheduleError(
                f"step index {t} outside [{lo}, {self.total_steps}]"
            )
        return t_arr

    def alpha_bar(self, t):
        """Cumulative product at 1-based step ``t`` (vectorised; ``t = 0`` gives 1)."""
        t_arr = self._check_step(t)
        return self._abar_ext[t_arr]

    def beta(self, t):
        t_arr = self._check_step(t, allow_zero=False)
        return self.betas[t_arr - 1]

    def alpha(self, t):
        t_arr = self._check_step(t, allow_zero=False)
        return self.alphas[t_arr - 1]

    def posterior_variance(self, t):
        """DDPM posterior variance beta_tilde_t = beta_t (1 - abar_{t-1}) / (1 - abar_t)."""
        t_arr = self._check_step(t, allow_zero=False)
        num = self.betas[t_arr - 1] * (1.0 - self._abar_ext[t_arr - 1])
        den = 1.0 - self._abar_ext[t_arr]
        # a noiseless prefix (abar_t = 1, only reachable through the test hook) has zero variance
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)

    def noise_scale(self, t) -> float:
        """Standard deviation sqrt(1 - abar_t) of the forward marginal."""
        return float(np.sqrt(1.0 - self.alpha_bar(t)))

    def truncate(self, num_steps: int) -> "NoiseSchedule":
        """The sub-schedule made of the first ``num_steps`` steps."""
        if not 1 <= num_steps <= self.total_steps:
            raise ScheduleError(
                f"num_steps={num_steps} outside [1, {self.total_steps}]"
            )
        if num_steps == self.total_steps:
            return self
        return NoiseSchedule(self.betas[:num_steps])


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly interpolated betas from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not beta_start > 0.0:
        raise ScheduleError(f"beta_start must be > 0, got {beta_start}")
    if not beta_end < 1.0:
        raise ScheduleError(f"beta_end must be < 1, got {beta_end}")
    if not beta_start <= beta_end:
        raise ScheduleError(
            f"beta_start={beta_start} must not exceed beta_end={beta_end}"
        )
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def sigma_ddim(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    """DDIM step standard deviation between ``t`` and an earlier ``t_prev``."""
    if t_prev >= t:
        raise IndexError(f"t_prev={t_prev} must be smaller than t={t}")
    if eta < 0:
        raise ScheduleError(f"eta must be non-negative, got {eta}")
    ab_t = float(schedule.alpha_bar(t))
    ab_prev = float(schedule.alpha_bar(t_prev))
    if eta == 0.0 or ab_t == 1.0:
        return 0.0
    var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)
    return float(eta * np.sqrt(max(var, 0.0)))


@dataclass(frozen=True, eq=False)
class RespacedSchedule:
    """A strictly increasing subset of steps with per-step DDIM deviations.

    ``sigmas[i]`` is the deviation used when moving from ``taus[i]`` to
    ``taus[i - 1]`` (with ``taus[-1]`` read as step 0 for ``i = 0``).
    """

    parent: NoiseSchedule
    taus: np.ndarray
    eta: float
    sigmas: np.ndarray

    @property
    def num_steps(self) -> int:
        return int(self.taus.size)

    @property
    def is_identity(self) -> bool:
        return self.num_steps == self.parent.total_steps

    def step_pair(self, i: int) -> tuple[int, int]:
        """``(tau_i, tau_{i-1})`` for 1-based position ``i``, with ``tau_0 = 0``."""
        if not 1 <= i <= self.num_steps:
            raise IndexError(f"position {i} outside [1, {self.num_steps}]")
        return int(self.taus[i - 1]), int(self.taus[i - 2]) if i > 1 else 0

    @property
    def acceleration(self) -> float:
        return self.parent.total_steps / self.num_steps


def respace(schedule: NoiseSchedule, num_steps: int, eta: float = 0.0) -> RespacedSchedule:
    """Evenly strided subset of ``num_steps`` steps ending at ``T``.

    ``tau_i = floor(i * T / S)`` for ``i = 1..S``.
    """
    T = schedule.total_steps
    if int(num_steps) != num_steps or num_steps < 1:
        raise ScheduleError(f"num_steps must be a positive integer, got {num_steps}")
    if num_steps > T:
        raise ScheduleError(f"num_steps={num_steps} exceeds total steps T={T}")
    if eta < 0:
        raise ScheduleError(f"eta must be non-negative, got {eta}")
    S = int(num_steps)
    taus = np.array([(i * T) // S for i in range(1, S + 1)], dtype=np.int64)
    prev = np.concatenate([[0], taus[:-1]])
    sigmas = np.array(
        [sigma_ddim(schedule, int(t), int(tp), eta) for t, tp in zip(taus, prev)]
    )
    taus.setflags(write=False)
    sigmas.setflags(write=False)
    return RespacedSchedule(parent=schedule, taus=taus, eta=float(eta), sigmas=sigmas)
