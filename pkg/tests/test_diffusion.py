import numpy as np
import pytest

from diffguard.diffusion import (
    NumericError,
    PurifyConfig,
    ddim_mean_std,
    ddim_reverse_step,
    ddpm_mean_std,
    ddpm_reverse_step,
    forward_sample,
    generate,
    guidance_scale,
    guided_purify,
    reverse_process,
    unguided_purify,
)
from diffguard.rng import StreamBank
from diffguard.schedule import NoiseSchedule, ScheduleError, make_linear_schedule, respace


def zero_denoiser(x, t):
    return np.zeros_like(x)


class FixedNoise:
    """Returns the same arbitrary prediction regardless of t."""

    def __init__(self, eps):
        self.eps = eps

    def __call__(self, x, t):
        return self.eps


class TrueNoise:
    """Oracle denoiser that knows the clean point and returns the exact forward noise."""

    def __init__(self, schedule, x0):
        self.schedule, self.x0 = schedule, x0

    def __call__(self, x, t):
        ab = float(self.schedule.alpha_bar(t))
        return (x - np.sqrt(ab) * self.x0) / np.sqrt(1 - ab)


def test_forward_sample_with_unit_alpha_bar_returns_input():
    s = NoiseSchedule.from_betas(np.zeros(3), check=False)
    x0 = np.array([0.3, -0.2])
    assert np.array_equal(forward_sample(s, x0, 3, np.random.default_rng(0)), x0)


def test_forward_sample_deterministic_and_range():
    s = make_linear_schedule(100)
    a = forward_sample(s, np.ones(4), 50, np.random.default_rng(1))
    b = forward_sample(s, np.ones(4), 50, np.random.default_rng(1))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ScheduleError):
        forward_sample(s, np.ones(4), 101, np.random.default_rng(1))


def test_forward_variance_of_zero_input():
    s = make_linear_schedule(1000)
    n = 100_000
    x = forward_sample(s, np.zeros(n), 300, np.random.default_rng(2))
    var = 1 - float(s.alpha_bar(300))
    assert abs(x.var(ddof=1) - var) < 3 * var * np.sqrt(2 / (n - 1))


def test_ddpm_zero_denoiser_mean():
    s = make_linear_schedule(100)
    x = np.array([0.5, -1.0, 2.0])
    mean, _ = ddpm_mean_std(zero_denoiser, s, x, 40)
    np.testing.assert_allclose(mean, x / np.sqrt(s.alpha(40)), rtol=0, atol=1e-15)


def test_ddpm_last_step_is_noiseless_and_seeded():
    s = make_linear_schedule(100)
    x = np.ones(3)
    out = ddpm_reverse_step(zero_denoiser, s, x, 1, np.random.default_rng(0))
    np.testing.assert_array_equal(out, x / np.sqrt(s.alpha(1)))
    a = ddpm_reverse_step(zero_denoiser, s, x, 10, np.random.default_rng(4))
    b = ddpm_reverse_step(zero_denoiser, s, x, 10, np.random.default_rng(4))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("t", [2, 17, 500, 1000])
def test_ddpm_equals_ddim_eta_one_consecutive(t):
    s = make_linear_schedule(1000)
    r = respace(s, 1000, eta=1.0)
    rng = np.random.default_rng(t)
    x = rng.normal(size=6)
    den = FixedNoise(rng.normal(size=6))
    m1, s1 = ddpm_mean_std(den, s, x, t)
    m2, s2 = ddim_mean_std(den, r, x, t)
    np.testing.assert_allclose(m1, m2, rtol=0, atol=1e-10)
    assert abs(s1**2 - float(s.posterior_variance(t))) == 0.0
    assert abs(s2**2 - float(s.posterior_variance(t))) < 1e-12
    a = ddpm_reverse_step(den, s, x, t, np.random.default_rng(9))
    b = ddim_reverse_step(den, r, x, t, np.random.default_rng(9))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_ddim_eta_zero_zero_denoiser_closed_form():
    s = make_linear_schedule(1000)
    r = respace(s, 50, eta=0.0)
    x = np.array([0.1, -0.4])
    i = 20
    t, tp = r.step_pair(i)
    out = ddim_reverse_step(zero_denoiser, r, x, i, rng=None)
    expect = np.sqrt(float(s.alpha_bar(tp)) / float(s.alpha_bar(t))) * x
    np.testing.assert_allclose(out, expect, rtol=0, atol=1e-15)


def test_ddim_true_noise_recovers_clean_estimate():
    s = make_linear_schedule(1000)
    r = respace(s, 1000, eta=0.0)
    x0 = np.array([0.7, -0.3, 0.1])
    x_t = forward_sample(s, x0, 600, np.random.default_rng(3))
    # one step with the exact noise lands exactly on the forward marginal's mean path
    out = ddim_reverse_step(TrueNoise(s, x0), r, x_t, 600, None)
    ab_p = float(s.alpha_bar(599))
    eps = TrueNoise(s, x0)(x_t, 600)
    np.testing.assert_allclose(out, np.sqrt(ab_p) * x0 + np.sqrt(1 - ab_p) * eps, atol=1e-10)


@pytest.mark.parametrize("S", [1, 7, 50, 1000])
def test_ddim_reconstruction_identity(S):
    s = make_linear_schedule(1000)
    x0 = np.array([0.9, -0.5, 0.25, 0.0])
    r = respace(s, S, eta=0.0)
    x_T = forward_sample(s, x0, 1000, np.random.default_rng(S))
    out = reverse_process(TrueNoise(s, x0), r, x_T, rng=None)
    np.testing.assert_allclose(out, x0, rtol=0, atol=1e-8)


def test_ddim_inconsistent_sigma_rejected():
    r = respace(make_linear_schedule(100), 10, eta=10.0)
    with pytest.raises(ScheduleError, match="sigma"):
        ddim_mean_std(zero_denoiser, r, np.zeros(2), 5)


def test_eta_zero_draws_no_randomness():
    r = respace(make_linear_schedule(100), 10, eta=0.0)
    rng = np.random.default_rng(0)
    state = rng.bit_generator.state
    reverse_process(zero_denoiser, r, np.ones(3), rng)
    assert rng.bit_generator.state == state


def test_guidance_scale_cases():
    s = NoiseSchedule.from_betas(np.array([0.5]))
    assert guidance_scale(s, 1, 1.0, 1.0) == pytest.approx(1.0, abs=1e-15)
    lin = make_linear_schedule(200)
    vals = [guidance_scale(lin, t, 2.0, 0.1) for t in range(1, 201)]
    assert np.all(np.diff(vals) > 0)
    assert all(guidance_scale(lin, t, 0.0, 0.1) == 0.0 for t in (1, 100, 200))
    with pytest.raises(ValueError):
        guidance_scale(lin, 5, 1.0, 0.0)


def test_zero_guidance_matches_unconditional_generation():
    s = make_linear_schedule(60)
    r = respace(s, 60, eta=1.0)
    den = FixedNoise(np.full(5, 0.1))
    cfg = PurifyConfig(T=60, guidance_a=0.0)
    out, trace = guided_purify(den, r, np.ones(5), cfg, np.random.default_rng(8))
    ref = np.clip(generate(den, r, (5,), np.random.default_rng(8)), -1, 1)
    assert out.tobytes() == ref.tobytes()
    assert len(trace) == 60


def test_guided_two_step_closed_form():
    betas = np.array([0.1, 0.3])
    s = NoiseSchedule.from_betas(betas)
    d = 3
    x_adv = np.array([0.5, -0.5, 0.2])
    a, r_bound = 0.4, 0.25
    cfg = PurifyConfig(T=2, guidance_a=a, perturbation_bound_r=r_bound, clamp_output=False)
    out, trace = guided_purify(zero_denoiser, s, x_adv, cfg, np.random.default_rng(11))

    g = np.random.default_rng(11)
    x2 = g.standard_normal(d)
    ab1, ab2 = 0.9, 0.63
    ref2 = np.sqrt(ab2) * x_adv + np.sqrt(1 - ab2) * g.standard_normal(d)
    var2 = 0.3 * (1 - ab1) / (1 - ab2)
    s2 = a * np.sqrt(1 - ab2) / (r_bound * np.sqrt(ab2))
    x1 = x2 / np.sqrt(0.7) - s2 * var2 * 2 * (x2 - ref2) / d + np.sqrt(var2) * g.standard_normal(d)
    g.standard_normal(d)  # guidance target at t=1 is drawn but carries zero weight
    x0 = x1 / np.sqrt(0.9)
    np.testing.assert_allclose(out, x0, rtol=0, atol=1e-14)
    assert trace.records[0].t == 2 and trace.records[0].scale == pytest.approx(s2)
    assert trace.records[1].shift_norm == 0.0


def test_guided_start_from_adversarial_uses_forward_sample():
    s = make_linear_schedule(30)
    cfg = PurifyConfig(T=30, guidance_a=0.0, start_from_noise=False, clamp_output=False)
    x = np.array([0.2, 0.4])
    out, _ = guided_purify(zero_denoiser, s, x, cfg, np.random.default_rng(1))
    g = np.random.default_rng(1)
    x_T = forward_sample(s, x, 30, g)
    ref = reverse_process(zero_denoiser, respace(s, 30, 1.0), x_T, g)
    assert out.tobytes() == ref.tobytes()


def test_guided_clamps_output():
    out, _ = guided_purify(FixedNoise(np.full(4, -30.0)), make_linear_schedule(20), np.zeros(4),
                           PurifyConfig(T=20, guidance_a=1.0), np.random.default_rng(0))
    assert np.all(np.abs(out) <= 1.0)


def test_numeric_error_reports_step():
    def bad(x, t):
        return np.full_like(x, np.nan) if t == 7 else np.zeros_like(x)

    with pytest.raises(NumericError, match="step 7") as info:
        guided_purify(bad, make_linear_schedule(10), np.zeros(2), PurifyConfig(T=10), np.random.default_rng(0))
    assert info.value.step == 7


def test_unguided_degenerate_schedule_is_affine_chain():
    s = NoiseSchedule.from_betas(np.zeros(4), check=False)
    x = np.array([0.3, -0.7])
    cfg = PurifyConfig(T=4, guided=False)
    out = unguided_purify(zero_denoiser, s, x, cfg, np.random.default_rng(0))
    np.testing.assert_array_equal(out, x)


def test_unguided_composition():
    s = make_linear_schedule(40)
    den = FixedNoise(np.full(3, 0.05))
    x = np.array([0.1, 0.2, -0.3])
    two = unguided_purify(den, s, x, PurifyConfig(T=25, M=2, guided=False, clamp_output=False),
                          np.random.default_rng(5))
    g = np.random.default_rng(5)
    one = PurifyConfig(T=25, M=1, guided=False, clamp_output=False)
    ref = unguided_purify(den, s, unguided_purify(den, s, x, one, g), one, g)
    assert two.tobytes() == ref.tobytes()


def test_batch_streams_match_single_examples():
    s = make_linear_schedule(50)
    den = FixedNoise(np.zeros((3, 2)))
    x = np.array([[0.1, 0.2], [0.3, -0.2], [0.0, 0.9]])
    cfg = PurifyConfig(T=50, guidance_a=0.5, perturbation_bound_r=0.1, respace_steps=10)
    batch, _ = guided_purify(den, s, x, cfg, StreamBank.for_items(3, range(3)))
    single = FixedNoise(np.zeros(2))
    for k in range(3):
        one, _ = guided_purify(single, s, x[k], cfg, np.random.default_rng([3, k]))
        np.testing.assert_array_equal(batch[k], one)


def test_config_validation():
    with pytest.raises(ValueError, match="M"):
        PurifyConfig(T=10, M=0)
    with pytest.raises(ValueError, match="respace_steps"):
        PurifyConfig(T=10, respace_steps=11)
    with pytest.raises(ScheduleError, match="T=20"):
        PurifyConfig(T=20).sampling_schedule(make_linear_schedule(10))
