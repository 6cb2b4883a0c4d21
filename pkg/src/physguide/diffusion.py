"""Noise schedules, guided denoising, the DDIM-family update and the
physics-guided sampling loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .motion import Condition, Motion, NULL_INDEX


@dataclass(frozen=True)
class NoiseSchedule:
    sigmas: np.ndarray  # (T+1,), sigmas[0] == 0

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64)
        if s.ndim != 1 or s.size < 2:
            raise ValueError("a noise schedule needs at least two levels")
        if s[0] != 0.0 or not np.all(np.diff(s) > 0):
            raise ValueError("noise levels must start at 0 and increase strictly")
        object.__setattr__(self, "sigmas", s)

    @property
    def T(self) -> int:
        return self.sigmas.size - 1


def build_noise_schedule(T: int, sigma_min: float, sigma_max: float) -> NoiseSchedule:
    """sigma_0 = 0 followed by T geometrically spaced levels from sigma_min to sigma_max."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < sigma_min < sigma_max) or not np.isfinite(sigma_max):
        raise ValueError("need 0 < sigma_min < sigma_max")
    if T == 1:
        return NoiseSchedule(np.array([0.0, sigma_max]))
    ratio = np.arange(T) / (T - 1)
    levels = sigma_min * (sigma_max / sigma_min) ** ratio
    levels[-1] = sigma_max
    return NoiseSchedule(np.concatenate([[0.0], levels]))


@dataclass(frozen=True)
class SamplerConfig:
    eta: float = 0.0
    guidance: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.guidance < 0:
            raise ValueError("guidance weight must be non-negative")


def variance_v(eta: float, sigma_t: float, sigma_s: float) -> float:
    """Variance of the stochastic part of the t -> s update.

    eta = 0 gives the ancestral (posterior) variance of the variance-exploding
    chain, eta = 1 the deterministic update.
    """
    if not 0.0 <= sigma_s < sigma_t:
        raise ValueError("need 0 <= sigma_s < sigma_t")
    # written as s^2 times factors <= 1 so rounding can never push v above s^2
    return sigma_s**2 * ((1.0 - (sigma_s / sigma_t) ** 2) * (1.0 - eta) ** 2)


class DenoiserFn(Protocol):
    def __call__(self, x: np.ndarray, sigma: float, cond: np.ndarray) -> np.ndarray: ...


def _cond_indices(c, n: int) -> np.ndarray:
    if isinstance(c, Condition):
        return np.full(n, c.index)
    if c is None:
        return np.full(n, NULL_INDEX)
    idx = np.array([ci.index if isinstance(ci, Condition) else int(ci) for ci in c])
    if idx.shape != (n,):
        raise ValueError("one condition per sample required")
    return idx


def guided_denoise(D: DenoiserFn, x_t: np.ndarray, sigma: float, c, w: float) -> np.ndarray:
    """Classifier-free guidance: D(x, null) + w (D(x, c) - D(x, null)).

    ``x_t`` is batched along axis 0; ``c`` is one Condition or one per row.
    """
    x_t = np.asarray(x_t)
    idx = _cond_indices(c, x_t.shape[0])
    null = np.full_like(idx, NULL_INDEX)
    uncond = D(x_t, sigma, null)
    if np.all(idx == NULL_INDEX):
        return uncond
    cond = D(x_t, sigma, idx)
    guided = uncond + w * (cond - uncond)
    rows = idx == NULL_INDEX
    if np.any(rows):
        guided[rows] = uncond[rows]
    return guided


def ddim_step(x_denoised, x_t, sigma_t, sigma_s, eta, rng) -> np.ndarray:
    """Move from noise level sigma_t to sigma_s given the denoised estimate.

    ``rng`` is a Generator or a sequence of Generators (one per batch row).
    No random numbers are drawn when the variance is zero.
    """
    x_denoised = np.asarray(x_denoised, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_denoised.shape != x_t.shape:
        raise ValueError(f"shape mismatch {x_denoised.shape} vs {x_t.shape}")
    v = variance_v(eta, sigma_t, sigma_s)
    mean = x_denoised + (np.sqrt(max(sigma_s**2 - v, 0.0)) / sigma_t) * (x_t - x_denoised)
    if v == 0.0:
        return mean
    return mean + np.sqrt(v) * _normal(rng, x_t.shape)


def _normal(rng, shape) -> np.ndarray:
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    return np.stack([r.standard_normal(shape[1:]) for r in rng])


# projection schedules

@dataclass(frozen=True)
class ProjectionSchedule:
    """A named family of projection placements.

    kind: "none" | "uniform" (N) | "startend" (M, N) | "end" (N, S) | "explicit" (steps)
    """

    kind: str = "none"
    params: tuple = ()

    def resolve(self, T: int) -> frozenset[int]:
        return resolve_schedule(self, T)

    @property
    def label(self) -> str:
        if self.kind == "none":
            return "none"
        if self.kind == "explicit":
            return "explicit:" + ",".join(str(p) for p in self.params)
        return ":".join([self.kind, *map(str, self.params)])

    @classmethod
    def parse(cls, text: str) -> "ProjectionSchedule":
        """Parse ``none``, ``uniform:N``, ``startend:M:N``, ``end:N:S`` or ``explicit:t1,t2``."""
        text = text.strip().lower()
        if text in ("", "none"):
            return cls("none")
        kind, _, rest = text.partition(":")
        try:
            if kind == "explicit":
                steps = tuple(sorted(int(v) for v in rest.split(",") if v.strip()))
                return cls("explicit", steps)
            nums = tuple(int(v) for v in rest.split(":"))
        except ValueError as err:
            raise ValueError(f"bad schedule spec {text!r}") from err
        arity = {"uniform": 1, "startend": 2, "end": 2}
        if kind not in arity or len(nums) != arity[kind]:
            raise ValueError(f"bad schedule spec {text!r}")
        return cls(kind, nums)


def resolve_schedule(spec: ProjectionSchedule, T: int) -> frozenset[int]:
    """Diffusion step indices (target step s = t - 1) at which projection runs.

    Uniform N spaces the steps by floor(0.9 T / (N - 1)) starting at 0, which
    leaves the highest-noise tenth of the trajectory unprojected; for T = 50,
    N = 4 this gives {0, 15, 30, 45}.
    """
    kind, p = spec.kind, spec.params
    if kind == "none":
        steps: list[int] = []
    elif kind == "uniform":
        (n,) = p
        if n < 1:
            raise ValueError("uniform schedule needs N >= 1")
        stride = 1 if n == 1 else max(1, (9 * T) // (10 * (n - 1)))
        steps = [k * stride for k in range(n)]
    elif kind == "end":
        n, space = p
        if n < 1 or space < 1:
            raise ValueError("end schedule needs N >= 1 and S >= 1")
        steps = [k * space for k in range(n)]
    elif kind == "startend":
        m, n = p
        if m < 0 or n < 0:
            raise ValueError("start/end counts must be non-negative")
        steps = list(range(T - m, T)) + list(range(n))
    elif kind == "explicit":
        steps = list(p)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if any(s < 0 or s > T - 1 for s in steps):
        raise ValueError(f"schedule {spec.label} has steps outside [0, {T - 1}]")
    if len(set(steps)) != len(steps):
        raise ValueError(f"schedule {spec.label} has overlapping steps")
    return frozenset(steps)


# sampling

class ProjectionFailed(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"projection failed at diffusion step {step}: {cause}")
        self.step = step
        self.cause = cause


class MotionCodec(Protocol):
    """Converts between Motions and the array space the denoiser works in."""

    def shape(self, H: int) -> tuple[int, ...]: ...
    def encode(self, motions: Sequence[Motion]) -> np.ndarray: ...
    def decode(self, x: np.ndarray, conditions: Sequence[Condition]) -> list[Motion]: ...


Projection = Callable[[list[Motion]], list[Motion]]


@dataclass
class SampleResult:
    motions: list[Motion]
    projected_steps: list[int] = field(default_factory=list)
    trajectory: list[np.ndarray] = field(default_factory=list)


def projected_sample(D: DenoiserFn, codec: MotionCodec, projection: Projection | None,
                     schedule: frozenset[int] | ProjectionSchedule, noise: NoiseSchedule,
                     conditions: Sequence[Condition], H: int, config: SamplerConfig,
                     keep_trajectory: bool = False) -> SampleResult:
    """Sample one motion per entry of ``conditions``.

    Chain i draws from its own generator seeded with ``config.seed + i``.
    When step s is scheduled, the denoised estimate is replaced by its
    projection before the update.  If the final step (s = 0) is projected
    the update returns the projected motion itself, which is what the
    update computes at sigma_0 = 0, without a lossy round trip through the
    denoiser's array space.
    """
    if isinstance(schedule, ProjectionSchedule):
        schedule = schedule.resolve(noise.T)
    if schedule and projection is None:
        raise ValueError("a non-empty schedule needs a projection")
    conditions = list(conditions)
    B = len(conditions)
    rngs = [np.random.default_rng(config.seed + i) for i in range(B)]
    shape = codec.shape(H)
    sig = noise.sigmas
    x = sig[-1] * np.stack([r.standard_normal(shape) for r in rngs])
    result = SampleResult([], [])
    projected: list[Motion] | None = None
    for t in range(noise.T, 0, -1):
        s = t - 1
        x_hat = guided_denoise(D, x, sig[t], conditions, config.guidance)
        projected = None
        if s in schedule:
            try:
                projected = projection(codec.decode(x_hat, conditions))
            except Exception as err:  # noqa: BLE001 - re-raised with the step index
                raise ProjectionFailed(s, err) from err
            x_hat = codec.encode(projected)
            result.projected_steps.append(s)
        x = ddim_step(x_hat, x, sig[t], sig[s], config.eta, rngs)
        if keep_trajectory:
            result.trajectory.append(x.copy())
    result.motions = projected if projected is not None else codec.decode(x, conditions)
    return result
