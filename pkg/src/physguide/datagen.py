"""Procedural stand / walk / hop gaits with optional artifact injection.

Joint trajectories are sinusoids; the root is then placed so the feet obey
ground contact: root height puts the lowest foot point on the ground and
root x keeps the supporting foot point fixed between frames.  Feet are kept
flat (ankle cancels the leg and torso rotation) except for the heel lift of
the hop gait, during which the toe carries the weight.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .character import POSE_DIM, CharacterModel
from .motion import CLASSES, Condition, Motion, MotionDataset, write_motion

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class GaitParams:
    kind: str
    frequency: float  # cycles per second
    stride_length: float = 0.0  # m, walk only
    hip_amplitude: float = 0.0  # rad, stand sway
    knee_amplitude: float = 0.0  # rad
    clearance: float = 0.0  # m, walk swing-foot lift
    heel_lift: float = 0.0  # rad, hop only
    lean: float = 0.0  # rad, torso pitch
    phase: float = 0.0
    float_mm: float = 0.0
    slide_mm: float = 0.0  # per frame
    penetration_mm: float = 0.0

    def __post_init__(self):
        if self.kind not in CLASSES:
            raise ValueError(f"unknown gait kind {self.kind!r}")
        if not self.frequency > 0:
            raise ValueError("frequency must be positive")


DEFAULT_RANGES = {
    "stand": {"frequency": (0.2, 0.5), "hip_amplitude": (0.02, 0.08),
              "knee_amplitude": (0.05, 0.25), "lean": (-0.05, 0.05)},
    "walk": {"frequency": (0.8, 1.2), "stride_length": (0.45, 0.75),
             "clearance": (0.04, 0.10), "lean": (0.0, 0.1)},
    "hop": {"frequency": (1.6, 2.4), "knee_amplitude": (0.4, 0.8),
            "heel_lift": (0.2, 0.5), "lean": (0.0, 0.1)},
}


def _joint_tracks(p: GaitParams, t: np.ndarray, character: CharacterModel):
    """Return torso pitch (H,) and joint angles (H, 6) before root placement."""
    w = 2 * np.pi * p.frequency
    phi = w * t + p.phase
    theta = np.full_like(t, p.lean)
    joints = np.zeros((t.size, 6))
    foot_angle = np.zeros((t.size, 2))
    if p.kind == "stand":
        bend = -0.5 * p.knee_amplitude * (1 - np.cos(phi))
        sway = p.hip_amplitude * np.sin(phi)
        for base in (0, 3):
            joints[:, base + 1] = bend
            joints[:, base] = sway - 0.5 * bend
        theta = theta + 0.5 * p.hip_amplitude * np.sin(phi + 0.5)
    elif p.kind == "walk":
        th, sh = character.thigh, character.shin
        leg = th + sh
        amp = np.arcsin(np.clip(p.stride_length / (2 * leg), 0.0, 0.99))
        theta = theta + 0.03 * np.sin(2 * phi)
        for k, base in enumerate((0, 3)):
            s = np.mod(phi + k * np.pi + np.pi / 2, 2 * np.pi) / np.pi  # swing while s < 1
            u = np.where(s < 1, s, s - 1)
            stance = amp * np.cos(np.pi * u)  # world thigh angle, +amp -> -amp
            # swing: ankle path relative to the hip, lifted above the stance ankle
            ax = -leg * np.sin(amp) * np.cos(np.pi * u)
            az = -(leg * np.cos(stance) - p.clearance * np.sin(np.pi * u))
            thigh, knee = _two_link_ik(ax, az, th, sh)
            swing = s < 1
            joints[:, base] = np.where(swing, thigh, stance) - theta
            joints[:, base + 1] = np.where(swing, knee, 0.0)
    else:
        squat = -0.5 * p.knee_amplitude * (1 - np.cos(phi))
        lift = -p.heel_lift * np.maximum(0.0, np.sin(phi)) ** 2
        for k, base in enumerate((0, 3)):
            joints[:, base + 1] = squat
            joints[:, base] = -0.5 * squat
            foot_angle[:, k] = lift
    for k, base in enumerate((0, 3)):
        joints[:, base + 2] = foot_angle[:, k] - (theta + joints[:, base] + joints[:, base + 1])
    return theta, joints


def _two_link_ik(x, z, l1, l2):
    """World thigh angle and (non-positive) knee angle placing the ankle at (x, z) from the hip."""
    d = np.minimum(np.hypot(x, z), l1 + l2)
    knee = -np.arccos(np.clip((d**2 - l1**2 - l2**2) / (2 * l1 * l2), -1.0, 1.0))
    inner = np.arccos(np.clip((l1**2 + d**2 - l2**2) / (2 * l1 * d), -1.0, 1.0))
    return np.arctan2(x, -z) + inner, knee


def generate_gait(params: GaitParams, H: int, character: CharacterModel | None = None,
                  rng: np.random.Generator | None = None, fps: float = 30.0) -> Motion:
    """Build one labelled motion of H frames.

    ``rng`` only jitters the phase when ``params.phase`` is left at 0; the
    construction is otherwise deterministic.
    """
    character = character or CharacterModel()
    if params.phase == 0.0 and rng is not None:
        params = GaitParams(**{**asdict(params), "phase": float(rng.uniform(0, 2 * np.pi))})
    t = np.arange(H) / fps
    theta, joints = _joint_tracks(params, t, character)
    lim = character.joint_limits
    if np.any(joints < lim[:, 0]) or np.any(joints > lim[:, 1]):
        raise ValueError("gait parameters violate joint limits")

    frames = np.zeros((H, POSE_DIM))
    frames[:, 2] = theta
    frames[:, 3:] = joints
    kin = character.kinematics
    rel = kin.positions(frames)[:, kin.foot_idx, :]  # root at origin
    low = rel[:, :, 1].min(axis=1)
    frames[:, 1] = -low
    # supporting point: lowest foot point, preferring the heel on ties
    support = np.argmin(np.round(rel[:, :, 1] - low[:, None], 9), axis=1)
    x = np.zeros(H)
    for h in range(1, H):
        a = support[h]
        x[h] = x[h - 1] + rel[h - 1, a, 0] - rel[h, a, 0]
    frames[:, 0] = x

    frames[:, 1] += (params.float_mm - params.penetration_mm) / 1000.0
    frames[:, 0] += np.arange(H) * params.slide_mm / 1000.0
    return Motion(frames, fps, Condition(params.kind), character)


def sample_params(kind: str, ranges: dict, rng: np.random.Generator) -> GaitParams:
    values = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in sorted(ranges.items())}
    values.setdefault("phase", float(rng.uniform(0, 2 * np.pi)))
    return GaitParams(kind=kind, **values)


def build_dataset(out_dir, counts: dict | None = None, H: int = 60, seed: int = 0,
                  ranges: dict | None = None, character: CharacterModel | None = None,
                  write: bool = True) -> MotionDataset:
    counts = counts or {c: 300 for c in CLASSES}
    ranges = ranges or DEFAULT_RANGES
    character = character or CharacterModel()
    if any(n < 1 for n in counts.values()):
        raise ValueError("class counts must be >= 1")
    motions, files = [], []
    index = 0
    for kind in CLASSES:
        for _ in range(counts.get(kind, 0)):
            rng = np.random.default_rng([seed, index])
            m = generate_gait(sample_params(kind, ranges[kind], rng), H, character)
            motions.append(m)
            files.append({"file": f"motion_{index:05d}.json", "label": kind, "seed": [seed, index]})
            index += 1
    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": seed,
        "H": H,
        "class_counts": {k: counts.get(k, 0) for k in CLASSES},
        "param_ranges": ranges,
        "files": files,
    }
    if write:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for m, item in zip(motions, files):
            write_motion(m, out / item["file"])
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return MotionDataset(motions, manifest)
