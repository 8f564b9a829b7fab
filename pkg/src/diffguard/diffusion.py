"""Forward noising, DDPM/DDIM reverse steps and the two purification samplers.

A *denoiser* is anything callable as ``denoiser(x, t) -> eps_hat`` with the
shape of ``x``; :class:`~diffguard.neural.Mlp` instances qualify. ``rng`` is a
``numpy.random.Generator`` or a :class:`~diffguard.rng.StreamBank`. Arrays are
either a single example ``(d,)`` or a batch ``(n, d)``.

Randomness is drawn only where it is used: a step with zero deviation draws
nothing, and the diffused guidance target is drawn only when the guidance
strength is positive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schedule import NoiseSchedule, RespacedSchedule, ScheduleError, respace


class NumericError(FloatingPointError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class PurifyConfig:
    T: int
    M: int = 1
    guidance_a: float = 0.0
    perturbation_bound_r: float = 8.0 / 255.0
    eta: float = 1.0
    respace_steps: int | None = None
    start_from_noise: bool = True
    clamp_output: bool = True
    guided: bool = True

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.guidance_a < 0:
            raise ValueError(f"guidance_a must be >= 0, got {self.guidance_a}")
        if self.perturbation_bound_r <= 0:
            raise ValueError(f"perturbation_bound_r must be > 0, got {self.perturbation_bound_r}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.respace_steps is not None and not 1 <= self.respace_steps <= self.T:
            raise ValueError(f"respace_steps must lie in [1, T={self.T}], got {self.respace_steps}")

    @property
    def steps(self) -> int:
        return self.T if self.respace_steps is None else self.respace_steps

    def sampling_schedule(self, schedule: NoiseSchedule) -> RespacedSchedule:
        """First ``T`` steps of ``schedule``, respaced to ``steps`` with this ``eta``."""
        if self.T > schedule.total_steps:
            raise ScheduleError(f"T={self.T} exceeds schedule length {schedule.total_steps}")
        return respace(schedule.truncate(self.T), self.steps, self.eta)


@dataclass
class StepRecord:
    t: int
    scale: float
    distance: float
    shift_norm: float


@dataclass
class GuidanceTrace:
    """One record per executed reverse step; batch values are averaged over rows."""

    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def rows(self):
        return [(r.t, r.scale, r.distance, r.shift_norm) for r in self.records]


def _check_finite(x, step):
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite sampler state", step)


def forward_sample(schedule: NoiseSchedule, x0, t: int, rng):
    """Draw x_t ~ N(sqrt(abar_t) x0, (1 - abar_t) I)."""
    if not 1 <= t <= schedule.total_steps:
        raise ScheduleError(f"t={t} outside [1, {schedule.total_steps}]")
    x0 = np.asarray(x0, dtype=np.float64)
    _check_finite(x0, t)
    ab = float(schedule.alpha_bar(t))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * rng.standard_normal(x0.shape)


def _predict(denoiser, x, t, step):
    eps = np.asarray(denoiser(x, t), dtype=np.float64)
    if eps.shape != x.shape:
        raise ValueError(f"denoiser returned shape {eps.shape} for input {x.shape}")
    if not np.all(np.isfinite(eps)):
        raise NumericError("non-finite denoiser output", step)
    return eps


def ddpm_mean_std(denoiser, schedule: NoiseSchedule, x_t, t: int):
    """Reverse-kernel mean ``(x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t)`` and posterior std."""
    eps = _predict(denoiser, x_t, t, t)
    beta = float(schedule.beta(t))
    resid = 1.0 - float(schedule.alpha_bar(t))
    coef = beta / np.sqrt(resid) if resid > 0 else 0.0
    mean = (x_t - coef * eps) / np.sqrt(1.0 - beta)
    std = float(np.sqrt(schedule.posterior_variance(t)))
    return mean, std


def ddpm_reverse_step(denoiser, schedule: NoiseSchedule, x_t, t: int, rng):
    if t < 1:
        raise ScheduleError(f"t must be >= 1, got {t}")
    x_t = np.asarray(x_t, dtype=np.float64)
    mean, std = ddpm_mean_std(denoiser, schedule, x_t, t)
    if t == 1 or std == 0.0:
        return mean
    return mean + std * rng.standard_normal(x_t.shape)


def ddim_mean_std(denoiser, respaced: RespacedSchedule, x, i: int):
    """Mean and std of the move from ``tau_i`` to ``tau_{i-1}`` (``i`` is 1-based, ``tau_0 = 0``)."""
    if not 1 <= i <= respaced.num_steps:
        raise ScheduleError(f"position i={i} outside [1, {respaced.num_steps}]")
    sched = respaced.parent
    t, t_prev = respaced.step_pair(i)
    sigma = float(respaced.sigmas[i - 1])
    ab_t = float(sched.alpha_bar(t))
    ab_prev = float(sched.alpha_bar(t_prev))
    rest = 1.0 - ab_prev - sigma * sigma
    if rest < -1e-12:
        raise ScheduleError(
            f"sigma^2={sigma * sigma:.6g} exceeds 1 - abar_prev={1.0 - ab_prev:.6g} at tau={t}"
        )
    eps = _predict(denoiser, x, t, t)
    x0_hat = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    mean = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(rest, 0.0)) * eps
    return mean, sigma


def ddim_reverse_step(denoiser, respaced: RespacedSchedule, x, i: int, rng):
    x = np.asarray(x, dtype=np.float64)
    mean, sigma = ddim_mean_std(denoiser, respaced, x, i)
    if sigma == 0.0:
        return mean
    return mean + sigma * rng.standard_normal(x.shape)


def guidance_scale(schedule: NoiseSchedule, t: int, a: float, r: float) -> float:
    """s_t = a sqrt(1 - abar_t) / (r sqrt(abar_t))."""
    if r <= 0:
        raise ValueError(f"perturbation bound r must be > 0, got {r}")
    if a < 0:
        raise ValueError(f"guidance strength a must be >= 0, got {a}")
    ab = float(schedule.alpha_bar(t))
    return float(a * np.sqrt(1.0 - ab) / (r * np.sqrt(ab)))


def _step_mean_std(denoiser, respaced, x, i):
    # consecutive steps with eta = 1 use the DDPM kernel itself
    if respaced.is_identity and respaced.eta == 1.0:
        t = int(respaced.taus[i - 1])
        return ddpm_mean_std(denoiser, respaced.parent, x, t)
    return ddim_mean_std(denoiser, respaced, x, i)


def reverse_process(denoiser, respaced: RespacedSchedule, x_T, rng, guide=None, trace=None):
    """Run the reverse chain from ``tau_S`` down to step 0.

    ``guide`` is ``None`` or a tuple ``(x0_adv, a, r)``; each step then shifts
    the mean by ``-s_t sigma_t^2 grad D(x_t, x_t')`` with D the mean squared
    error, i.e. ``grad = 2 (x_t - x_t') / d``, and ``x_t'`` a fresh forward
    sample of the guidance image.
    """
    x = np.asarray(x_T, dtype=np.float64)
    sched = respaced.parent
    d = x.shape[-1]
    if guide is not None:
        x_ref, a, r = guide
        x_ref = np.asarray(x_ref, dtype=np.float64)
        if x_ref.shape != x.shape:
            raise ValueError(f"guidance image shape {x_ref.shape} differs from state {x.shape}")
    for i in range(respaced.num_steps, 0, -1):
        t = int(respaced.taus[i - 1])
        active = guide is not None and a > 0
        if active:
            ab = float(sched.alpha_bar(t))
            x_ref_t = np.sqrt(ab) * x_ref + np.sqrt(1.0 - ab) * rng.standard_normal(x.shape)
        mean, std = _step_mean_std(denoiser, respaced, x, i)
        if active:
            s_t = guidance_scale(sched, t, a, r)
            diff = x - x_ref_t
            shift = -s_t * std * std * (2.0 / d) * diff
            mean = mean + shift
            if trace is not None:
                trace.records.append(StepRecord(
                    t, s_t,
                    float(np.mean(np.mean(diff * diff, axis=-1))),
                    float(np.mean(np.linalg.norm(np.atleast_2d(shift), axis=-1))),
                ))
        elif trace is not None and guide is not None:
            trace.records.append(StepRecord(t, 0.0, float("nan"), 0.0))
        x = mean if std == 0.0 else mean + std * rng.standard_normal(x.shape)
        _check_finite(x, t)
    return x


def generate(denoiser, respaced: RespacedSchedule, shape, rng):
    """Unconditional sampling from x_T ~ N(0, I)."""
    x_T = rng.standard_normal(shape)
    return reverse_process(denoiser, respaced, x_T, rng)


def _as_respaced(schedule_or_respaced, config: PurifyConfig) -> RespacedSchedule:
    if isinstance(schedule_or_respaced, RespacedSchedule):
        return schedule_or_respaced
    return config.sampling_schedule(schedule_or_respaced)


def guided_purify(denoiser, schedule_or_respaced, x0_adv, config: PurifyConfig, rng):
    """Guided purification; starts from N(0, I) or from the diffused input.

    Returns ``(x0, trace)``.
    """
    respaced = _as_respaced(schedule_or_respaced, config)
    x0_adv = np.asarray(x0_adv, dtype=np.float64)
    T = int(respaced.taus[-1])
    if config.start_from_noise:
        x_T = rng.standard_normal(x0_adv.shape)
    else:
        x_T = forward_sample(respaced.parent, x0_adv, T, rng)
    trace = GuidanceTrace()
    out = reverse_process(
        denoiser, respaced, x_T, rng,
        guide=(x0_adv, config.guidance_a, config.perturbation_bound_r), trace=trace,
    )
    if config.clamp_output:
        out = np.clip(out, -1.0, 1.0)
    return out, trace


def unguided_purify(denoiser, schedule_or_respaced, x0_adv, config: PurifyConfig, rng):
    """M rounds of diffuse-to-T then reverse; each round starts from the previous output."""
    respaced = _as_respaced(schedule_or_respaced, config)
    T = int(respaced.taus[-1])
    x = np.asarray(x0_adv, dtype=np.float64)
    for _ in range(config.M):
        x_T = forward_sample(respaced.parent, x, T, rng)
        x = reverse_process(denoiser, respaced, x_T, rng)
    if config.clamp_output:
        x = np.clip(x, -1.0, 1.0)
    return x


def purify(denoiser, schedule, x, config: PurifyConfig, rng):
    """Dispatch on ``config.guided``; returns the purified array only."""
    if config.guided:
        return guided_purify(denoiser, schedule, x, config, rng)[0]
    return unguided_purify(denoiser, schedule, x, config, rng)

