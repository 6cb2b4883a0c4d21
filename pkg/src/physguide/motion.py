"""Motions, angle arithmetic and the motion file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .character import POSE_DIM, CharacterModel, Pose

FORMAT_VERSION = 1
CLASSES = ("stand", "walk", "hop")
NULL_INDEX = len(CLASSES)
ANGLE_COLUMNS = slice(2, POSE_DIM)
# float32 nearest to pi rounds above the float64 value
_PI32 = float(np.float32(np.pi))


def rot_diff(a, b):
    """Relative rotation ``a - b`` wrapped into (-pi, pi]."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    inside = (d > -np.pi) & (d <= np.pi)
    out = np.where(inside, d, np.pi - np.mod(np.pi - d, 2 * np.pi))
    return float(out) if out.ndim == 0 else out


def wrap_angle(a):
    return rot_diff(a, 0.0)


@dataclass(frozen=True)
class Condition:
    """Action label or the null token (``label=None``)."""

    label: str | None = None

    def __post_init__(self):
        if self.label is not None and self.label not in CLASSES:
            raise ValueError(f"unknown condition label {self.label!r}")

    @property
    def is_null(self) -> bool:
        return self.label is None

    @property
    def index(self) -> int:
        return NULL_INDEX if self.label is None else CLASSES.index(self.label)

    @classmethod
    def from_index(cls, i: int) -> "Condition":
        return cls(None if i == NULL_INDEX else CLASSES[i])


NULL = Condition(None)


@dataclass(frozen=True)
class Motion:
    """H poses at a fixed frame rate, stored as an (H, 9) float32 array."""

    frames: np.ndarray
    fps: float = 30.0
    condition: Condition = field(default_factory=Condition)
    character: CharacterModel = field(default_factory=CharacterModel)

    def __post_init__(self):
        f = np.array(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != POSE_DIM or f.shape[0] < 1:
            raise ValueError(f"frames must have shape (H>=1, {POSE_DIM}), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("motion contains non-finite values")
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        a = f[:, ANGLE_COLUMNS]
        out = (a <= -np.pi) | (a > _PI32)
        a[out] = wrap_angle(a[out])
        f[:, ANGLE_COLUMNS] = a
        f32 = f.astype(np.float32)
        a32 = f32[:, ANGLE_COLUMNS]
        a32[a32 <= -np.pi] = np.float32(np.pi)
        f32[:, ANGLE_COLUMNS] = a32
        f32.setflags(write=False)
        object.__setattr__(self, "frames", f32)

    @property
    def H(self) -> int:
        return self.frames.shape[0]

    def pose(self, h: int) -> Pose:
        return Pose.from_vector(self.frames[h])

    def with_frames(self, frames) -> "Motion":
        return Motion(frames, self.fps, self.condition, self.character)

    @classmethod
    def from_poses(cls, poses, fps=30.0, condition=None, character=None) -> "Motion":
        return cls(
            np.stack([p.vector() for p in poses]),
            fps,
            condition or Condition(),
            character or CharacterModel(),
        )


def angles_valid(frames: np.ndarray) -> bool:
    a = np.asarray(frames)[..., ANGLE_COLUMNS]
    return bool(np.all(a > -np.pi) and np.all(a <= _PI32))


def frame_velocities(frames: np.ndarray, fps: float) -> np.ndarray:
    """Finite-difference velocities of an (..., H, 9) array; last frame repeats."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-2] < 2:
        raise ValueError("finite differences need at least 2 frames")
    d = np.diff(frames, axis=-2)
    d[..., ANGLE_COLUMNS] = rot_diff(frames[..., 1:, ANGLE_COLUMNS], frames[..., :-1, ANGLE_COLUMNS])
    v = d * fps
    return np.concatenate([v, v[..., -1:, :]], axis=-2)


def finite_diff_velocities(motion: Motion) -> np.ndarray:
    return frame_velocities(motion.frames, motion.fps)


def _fmt(x: float) -> float:
    return float(f"{float(x):.9g}")


def motion_to_dict(motion: Motion) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "fps": motion.fps,
        "character": motion.character.to_dict(),
        "condition": motion.condition.label,
        "frames": [[_fmt(v) for v in row] for row in motion.frames],
    }


def motion_from_dict(d: dict) -> Motion:
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported motion format_version {d.get('format_version')}")
    return Motion(
        np.array(d["frames"], dtype=np.float64),
        float(d["fps"]),
        Condition(d.get("condition")),
        CharacterModel.from_dict(d["character"]),
    )


def write_motion(motion: Motion, path) -> None:
    Path(path).write_text(json.dumps(motion_to_dict(motion)))


def read_motion(path) -> Motion:
    return motion_from_dict(json.loads(Path(path).read_text()))


@dataclass
class MotionDataset:
    motions: list[Motion]
    manifest: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.motions)

    @property
    def labels(self) -> list[str | None]:
        return [m.condition.label for m in self.motions]

    def frames_array(self) -> np.ndarray:
        return np.stack([m.frames for m in self.motions]).astype(np.float64)

    @property
    def character(self) -> CharacterModel:
        return self.motions[0].character


def load_dataset(directory) -> MotionDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    motions = []
    for item in manifest["files"]:
        m = read_motion(directory / item["file"])
        if m.condition.label != item["label"]:
            raise ValueError(f"label mismatch for {item['file']}")
        motions.append(m)
    return MotionDataset(motions, manifest)
