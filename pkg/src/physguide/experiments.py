"""Sampling and evaluation harness: schedule sweeps, projection-count curves
and the in-loop versus post-processing comparison."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .denoiser import Denoiser
from .diffusion import ProjectionSchedule, SamplerConfig, build_noise_schedule, projected_sample
from .imitation import Policy, Projector
from .metrics import ActionClassifier, FeatureStats, eval_accuracy, features_batch, fid_proxy, phys_metrics_batch
from .motion import CLASSES, Condition, Motion

TABLE_VARIANTS = ("uniform:4", "startend:3:1", "startend:2:2", "end:4:3", "end:4:2", "end:4:1")
METRIC_KEYS = ("penetrate", "float", "skate", "phys_err", "fid", "accuracy")


@dataclass
class EvalConfig:
    B: int = 64
    seeds: tuple = (0, 1, 2)
    T: int = 50
    eta: float = 0.0
    guidance: float = 2.5
    H: int | None = None  # denoiser length when None
    projection_mode: str = "mean"

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        self.seeds = tuple(int(s) for s in self.seeds)


def balanced_conditions(B: int) -> list[Condition]:
    return [Condition(CLASSES[i % len(CLASSES)]) for i in range(B)]


@dataclass
class Reference:
    """What generated motions are scored against."""

    stats: FeatureStats
    classifier: ActionClassifier | None = None

    @classmethod
    def from_motions(cls, motions: Sequence[Motion], classifier: ActionClassifier | None = None):
        m0 = motions[0]
        feats = features_batch(np.stack([m.frames for m in motions]).astype(np.float64), m0.fps, m0.character)
        return cls(FeatureStats.from_features(feats), classifier)


def evaluate_motions(motions: Sequence[Motion], ref: Reference) -> dict:
    """Mean physics metrics, FID-proxy and (if a classifier is given) accuracy."""
    m0 = motions[0]
    frames = np.stack([m.frames for m in motions]).astype(np.float64)
    rows = [p.as_dict() for p in phys_metrics_batch(frames, m0.character)]
    out = {k: float(np.mean([r[k] for r in rows])) for k in ("penetrate", "float", "skate", "phys_err")}
    out["fid"] = fid_proxy(FeatureStats.from_features(features_batch(frames, m0.fps, m0.character)), ref.stats)
    labels = [m.condition.label for m in motions]
    if ref.classifier is not None and all(l is not None for l in labels):
        out["accuracy"] = eval_accuracy(ref.classifier, list(motions), labels)
    else:
        out["accuracy"] = float("nan")
    return out


def per_motion_rows(motions: Sequence[Motion]) -> list[dict]:
    m0 = motions[0]
    frames = np.stack([m.frames for m in motions]).astype(np.float64)
    return [{"index": i, "label": m.condition.label, **p.as_dict()}
            for i, (m, p) in enumerate(zip(motions, phys_metrics_batch(frames, m0.character)))]


@dataclass
class SampleRun:
    motions: list[Motion]
    schedule: str
    seed: int
    projected_steps: list[int] = field(default_factory=list)
    projection_failures: int = 0
    seconds: float = 0.0


def sample(den: Denoiser, policy: Policy | None, schedule: str | ProjectionSchedule, seed: int,
           cfg: EvalConfig = EvalConfig()) -> SampleRun:
    """B class-balanced samples; an empty schedule is plain DDIM sampling."""
    spec = schedule if isinstance(schedule, ProjectionSchedule) else ProjectionSchedule.parse(schedule)
    noise = build_noise_schedule(cfg.T, den.sigma_min, den.sigma_max)
    steps = spec.resolve(cfg.T)
    proj = Projector(policy, cfg.projection_mode, seed) if (steps and policy is not None) else None
    t0 = time.perf_counter()
    res = projected_sample(den, den, proj, steps, noise, balanced_conditions(cfg.B), cfg.H or den.H,
                           SamplerConfig(cfg.eta, cfg.guidance, seed))
    return SampleRun(res.motions, spec.label, seed, sorted(res.projected_steps),
                     proj.failures if proj else 0, time.perf_counter() - t0)


def postprocess(policy: Policy, motions: list[Motion], k: int, seed: int = 0, mode: str = "mean") -> list[Motion]:
    """Apply the projection k times after sampling."""
    proj = Projector(policy, mode, seed)
    for _ in range(k):
        motions = proj(motions)
    return motions


def _aggregate(rows: list[dict], group: str) -> list[dict]:
    out = []
    for key in dict.fromkeys(r[group] for r in rows):
        sel = [r for r in rows if r[group] == key]
        agg = {group: key, "seed": "mean"}
        for m in METRIC_KEYS:
            vals = np.array([r[m] for r in sel], dtype=float)
            agg[m] = float(vals.mean())
            agg[m + "_std"] = float(vals.std())
        out.append(agg)
    return out


@dataclass
class SweepReport:
    rows: list[dict]  # one per (variant, seed)
    aggregate: list[dict]  # one per variant
    complete: bool = True
    error: str | None = None


def sweep_schedules(den: Denoiser, policy: Policy, ref: Reference, variants: Sequence[str] = TABLE_VARIANTS,
                    cfg: EvalConfig = EvalConfig(), group: str = "schedule") -> SweepReport:
    """Sample and score every variant under every seed.

    A failing variant stops the sweep; rows finished so far are kept.
    """
    rows: list[dict] = []
    for variant in variants:
        for seed in cfg.seeds:
            try:
                run = sample(den, policy, variant, seed, cfg)
            except Exception as err:  # noqa: BLE001 - reported with partial rows
                return SweepReport(rows, _aggregate(rows, group), False, f"{variant} seed {seed}: {err}")
            rows.append({group: variant, "seed": seed, **evaluate_motions(run.motions, ref),
                         "projections": len(run.projected_steps), "failures": run.projection_failures,
                         "seconds": run.seconds})
    return SweepReport(rows, _aggregate(rows, group))


def count_schedule(n: int, T: int) -> str:
    """End schedule with unit spacing holding n projections (0 means none)."""
    if not 0 <= n <= T:
        raise ValueError(f"projection count must lie in [0, {T}]")
    return "none" if n == 0 else f"end:{n}:1"


def projection_count_curve(den: Denoiser, policy: Policy, ref: Reference, counts: Sequence[int] | None = None,
                           cfg: EvalConfig = EvalConfig()) -> SweepReport:
    counts = list(counts) if counts is not None else [0, 1, 4, 12, cfg.T]
    report = sweep_schedules(den, policy, ref, [count_schedule(n, cfg.T) for n in counts], cfg)
    by_label = {count_schedule(n, cfg.T): n for n in counts}
    for r in report.rows + report.aggregate:
        r["count"] = by_label[r["schedule"]]
    return report


def compare_postproc(den: Denoiser, policy: Policy, ref: Reference, max_steps: int = 4,
                     cfg: EvalConfig = EvalConfig()) -> SweepReport:
    """k = 0..max_steps repeated post-processing projections of DDIM samples
    versus sampling with k in-loop projections at the final steps."""
    if max_steps < 0:
        raise ValueError("max_steps must be non-negative")
    rows: list[dict] = []
    try:
        for seed in cfg.seeds:
            plain = sample(den, None, "none", seed, cfg).motions
            for k in range(max_steps + 1):
                post = postprocess(policy, plain, k, seed, cfg.projection_mode)
                rows.append({"method": "postproc", "k": k, "seed": seed, **evaluate_motions(post, ref)})
                loop = sample(den, policy, count_schedule(k, cfg.T), seed, cfg).motions
                rows.append({"method": "in_loop", "k": k, "seed": seed, **evaluate_motions(loop, ref)})
    except Exception as err:  # noqa: BLE001
        return SweepReport(rows, _agg_postproc(rows), False, str(err))
    return SweepReport(rows, _agg_postproc(rows))


def _agg_postproc(rows: list[dict]) -> list[dict]:
    for r in rows:
        r["cell"] = f"{r['method']}:{r['k']}"
    agg = _aggregate(rows, "cell")
    for a in agg:
        method, k = a.pop("cell").split(":")
        a["method"], a["k"] = method, int(k)
    for r in rows:
        r.pop("cell")
    return agg


def config_dict(cfg: EvalConfig) -> dict:
    d = asdict(cfg)
    d["seeds"] = list(cfg.seeds)
    return d
