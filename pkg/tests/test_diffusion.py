import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from physguide.diffusion import (
    NoiseSchedule, ProjectionFailed, ProjectionSchedule, SamplerConfig, build_noise_schedule,
    ddim_step, guided_denoise, projected_sample, resolve_schedule, variance_v,
)
from physguide.motion import Condition, Motion, NULL_INDEX


class FrameCodec:
    """Raw frames as the sampling space."""

    def shape(self, H):
        return (H, 9)

    def encode(self, motions):
        return np.stack([m.frames for m in motions]).astype(np.float64)

    def decode(self, x, conditions):
        return [Motion(f, 30.0, c) for f, c in zip(x, conditions)]


def constant_denoiser(target):
    return lambda x, sigma, cond: np.broadcast_to(target, x.shape).copy()


def linear_denoiser(x, sigma, cond):
    # depends on input, noise level and condition so guidance is exercised
    return 0.5 * x / (1 + sigma) + 0.01 * np.asarray(cond, dtype=float)[:, None, None]


def test_noise_schedule_examples():
    assert np.allclose(build_noise_schedule(2, 0.1, 1.0).sigmas, [0, 0.1, 1.0])
    assert np.allclose(build_noise_schedule(3, 0.1, 1.0).sigmas, [0, 0.1, 0.31622777, 1.0])
    assert np.array_equal(build_noise_schedule(1, 0.1, 2.0).sigmas, [0, 2.0])
    s = build_noise_schedule(50, 0.02, 8.0).sigmas
    assert s[0] == 0 and np.all(np.diff(s) > 0) and s[-1] == 8.0
    for bad in [(0, 0.1, 1), (5, 0.0, 1), (5, 1.0, 0.5)]:
        with pytest.raises(ValueError):
            build_noise_schedule(*bad)
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.1, 1.0]))


def test_variance_examples():
    assert variance_v(0.0, 2.0, 1.0) == 0.75
    assert variance_v(1.0, 2.0, 1.0) == 0.0
    assert variance_v(0.3, 2.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        variance_v(0.0, 1.0, 1.0)


@given(st.floats(0, 1), st.floats(1e-3, 10), st.floats(0, 1))
def test_variance_bounds(eta, sigma_t, frac):
    sigma_s = frac * sigma_t * 0.999
    v = variance_v(eta, sigma_t, sigma_s)
    assert 0.0 <= v <= sigma_s**2


def test_ddim_examples():
    rng = np.random.default_rng(0)
    assert ddim_step(np.array([0.0]), np.array([2.0]), 2.0, 1.0, 1.0, rng)[0] == 1.0
    x_hat = np.array([[0.3, -1.2]])
    assert np.array_equal(ddim_step(x_hat, np.array([[5.0, 5.0]]), 1.0, 0.0, 0.0, rng), x_hat)
    assert np.array_equal(ddim_step(x_hat, x_hat, 3.0, 1.0, 1.0, rng), x_hat)
    with pytest.raises(ValueError):
        ddim_step(np.zeros(2), np.zeros(3), 1.0, 0.5, 1.0, rng)


def test_deterministic_step_draws_nothing():
    rng = np.random.default_rng(4)
    ddim_step(np.zeros(3), np.ones(3), 2.0, 1.0, 1.0, rng)
    assert rng.standard_normal() == np.random.default_rng(4).standard_normal()


def test_guidance_examples():
    x = np.zeros((1, 1, 1))
    D = lambda x, s, c: np.where(np.asarray(c)[:, None, None] == NULL_INDEX, 0.0, 1.0) + 0 * x
    assert guided_denoise(D, x, 1.0, Condition("walk"), 2.5)[0, 0, 0] == 2.5
    assert guided_denoise(D, x, 1.0, Condition("walk"), 1.0)[0, 0, 0] == 1.0
    assert guided_denoise(D, x, 1.0, Condition("walk"), 0.0)[0, 0, 0] == 0.0
    calls = []
    guided_denoise(lambda *a: calls.append(1) or x, x, 1.0, Condition(), 2.5)
    assert len(calls) == 1


def test_schedule_reference_examples():
    assert resolve_schedule(ProjectionSchedule("uniform", (4,)), 50) == {0, 15, 30, 45}
    assert resolve_schedule(ProjectionSchedule("end", (4, 3)), 50) == {0, 3, 6, 9}
    assert resolve_schedule(ProjectionSchedule("end", (4, 1)), 50) == {0, 1, 2, 3}
    assert resolve_schedule(ProjectionSchedule("startend", (3, 1)), 50) == {47, 48, 49, 0}
    assert resolve_schedule(ProjectionSchedule("uniform", (50,)), 50) == set(range(50))
    assert resolve_schedule(ProjectionSchedule("uniform", (1,)), 50) == {0}
    assert resolve_schedule(ProjectionSchedule(), 50) == frozenset()


@given(st.integers(1, 80), st.data())
def test_schedule_cardinalities(T, data):
    n = data.draw(st.integers(1, T))
    assert len(resolve_schedule(ProjectionSchedule("uniform", (n,)), T)) == n
    s = data.draw(st.integers(1, max(1, (T - 1) // max(n - 1, 1))))
    assert len(resolve_schedule(ProjectionSchedule("end", (n, s)), T)) == n
    m = data.draw(st.integers(0, T))
    k = data.draw(st.integers(0, T - m))
    assert len(resolve_schedule(ProjectionSchedule("startend", (m, k)), T)) == m + k


def test_schedule_errors():
    with pytest.raises(ValueError):
        resolve_schedule(ProjectionSchedule("end", (4, 20)), 50)
    with pytest.raises(ValueError):
        resolve_schedule(ProjectionSchedule("startend", (30, 30)), 50)
    with pytest.raises(ValueError):
        resolve_schedule(ProjectionSchedule("explicit", (50,)), 50)


def test_schedule_grammar():
    for text in ("none", "uniform:4", "startend:3:1", "end:4:1", "explicit:0,7,9"):
        spec = ProjectionSchedule.parse(text)
        assert ProjectionSchedule.parse(spec.label) == spec
    assert ProjectionSchedule.parse("end:4:1").resolve(50) == {0, 1, 2, 3}
    for bad in ("uniform", "end:4", "foo:1", "uniform:x"):
        with pytest.raises(ValueError):
            ProjectionSchedule.parse(bad)


def _sample(D, schedule, projection=None, eta=0.0, seed=0, B=3, T=8):
    noise = build_noise_schedule(T, 0.05, 4.0)
    conds = [Condition(c) for c in ("stand", "walk", "hop", None)[:B]]
    return projected_sample(D, FrameCodec(), projection, schedule, noise, conds, 5,
                            SamplerConfig(eta=eta, seed=seed), keep_trajectory=True)


def test_point_mass_converges_exactly():
    target = np.random.default_rng(1).uniform(-0.5, 0.5, (5, 9))
    for eta in (0.0, 0.5, 1.0):
        res = _sample(constant_denoiser(target), frozenset(), eta=eta)
        for m in res.motions:
            assert np.array_equal(m.frames, Motion(target).frames)


def test_empty_schedule_matches_stepwise_ddim():
    res = _sample(linear_denoiser, frozenset(), eta=0.0, B=4)
    noise = build_noise_schedule(8, 0.05, 4.0)
    rngs = [np.random.default_rng(i) for i in range(4)]
    x = noise.sigmas[-1] * np.stack([r.standard_normal((5, 9)) for r in rngs])
    conds = [Condition(c) for c in ("stand", "walk", "hop", None)]
    for k, t in enumerate(range(8, 0, -1)):
        x_hat = guided_denoise(linear_denoiser, x, noise.sigmas[t], conds, 2.5)
        x = ddim_step(x_hat, x, noise.sigmas[t], noise.sigmas[t - 1], 0.0, rngs)
        assert np.array_equal(x, res.trajectory[k])


def test_sampler_is_deterministic_and_chain_independent():
    a = _sample(linear_denoiser, frozenset(), eta=0.0, B=3)
    b = _sample(linear_denoiser, frozenset(), eta=0.0, B=3)
    c = _sample(linear_denoiser, frozenset(), eta=0.0, B=1)
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a.motions, b.motions))
    assert np.array_equal(a.motions[0].frames, c.motions[0].frames)
    d = _sample(linear_denoiser, frozenset(), eta=0.0, B=3, seed=1)
    assert not np.array_equal(a.motions[0].frames, d.motions[0].frames)


def _shift_projection(motions):
    return [m.with_frames(m.frames + np.float32(0.01)) for m in motions]


def test_final_step_projection_equals_post_processing():
    res = _sample(linear_denoiser, frozenset({0}), _shift_projection)
    plain = _sample(linear_denoiser, frozenset())
    post = _shift_projection(plain.motions)
    assert res.projected_steps == [0]
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(res.motions, post))


def test_projection_runs_at_scheduled_steps():
    res = _sample(linear_denoiser, ProjectionSchedule("end", (3, 2)), _shift_projection)
    assert res.projected_steps == [4, 2, 0]


def test_projection_failure_carries_step():
    def failing(motions):
        raise RuntimeError("boom")

    with pytest.raises(ProjectionFailed) as err:
        _sample(linear_denoiser, frozenset({5, 2}), failing)
    assert err.value.step == 5
    with pytest.raises(ValueError):
        _sample(linear_denoiser, frozenset({1}), None)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(eta=1.5)
    with pytest.raises(ValueError):
        SamplerConfig(guidance=-1.0)
