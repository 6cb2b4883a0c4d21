"""Physical plausibility metrics, a Frechet-distance proxy and action accuracy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .character import CharacterModel
from .motion import CLASSES, Motion, frame_velocities
from .nets import load_checkpoint, mlp, save_checkpoint

TOLERANCE_MM = 5.0
CONTACT_MM = 5.0


@dataclass(frozen=True)
class PhysMetrics:
    penetrate: float
    float: float
    skate: float
    phys_err: float

    @classmethod
    def from_parts(cls, penetrate, float_, skate) -> "PhysMetrics":
        return cls(float(penetrate), float(float_), float(skate), float(penetrate + float_ + skate))

    def as_dict(self) -> dict:
        return {"penetrate": self.penetrate, "float": self.float,
                "skate": self.skate, "phys_err": self.phys_err}


def _phys_arrays(frames: np.ndarray, character: CharacterModel):
    """Penetrate/Float/Skate (mm) for an (..., H, 9) array of frames."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-2] < 2:
        raise ValueError("physical metrics need at least 2 frames")
    kin = character.kinematics
    pos = kin.positions(frames)
    zmin = pos[..., kin.surface_idx, 1].min(axis=-1) * 1000.0
    pen = np.where(zmin < 0, np.maximum(0.0, -zmin - TOLERANCE_MM), 0.0).mean(axis=-1)
    flo = np.where(zmin > 0, np.maximum(0.0, zmin - TOLERANCE_MM), 0.0).mean(axis=-1)

    feet = pos[..., kin.foot_idx, :] * 1000.0  # (..., H, 4, 2)
    low = feet[..., 1] <= CONTACT_MM
    both = low[..., 1:, :] & low[..., :-1, :]
    dx = np.abs(np.diff(feet[..., 0], axis=-2))
    n = both.sum(axis=(-2, -1))
    total = np.where(both, dx, 0.0).sum(axis=(-2, -1))
    skate = np.where(n > 0, total / np.maximum(n, 1), 0.0)
    return pen, flo, skate


def compute_phys_metrics(motion: Motion, character: CharacterModel | None = None) -> PhysMetrics:
    pen, flo, sk = _phys_arrays(motion.frames, character or motion.character)
    return PhysMetrics.from_parts(pen, flo, sk)


def phys_metrics_batch(frames: np.ndarray, character: CharacterModel) -> list[PhysMetrics]:
    pen, flo, sk = _phys_arrays(frames, character)
    return [PhysMetrics.from_parts(*v) for v in zip(pen, flo, sk)]


def motion_features(motion: Motion) -> np.ndarray:
    """Fixed-length summary: pose/velocity moments plus foot height and duty cycle."""
    return features_batch(motion.frames[None], motion.fps, motion.character)[0]


def features_batch(frames: np.ndarray, fps: float, character: CharacterModel) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-2] < 2:
        raise ValueError("features need at least 2 frames")
    seq = frames[..., 1:, :].copy()
    seq[..., 0] = np.diff(frames[..., 0], axis=-1)
    vel = frame_velocities(frames, fps)
    kin = character.kinematics
    feet = kin.positions(frames)[..., kin.foot_idx, 1]  # (..., H, 4)
    foot_h = np.stack([feet[..., :2].min(-1), feet[..., 2:].min(-1)], axis=-1)
    duty = (foot_h * 1000.0 <= CONTACT_MM).mean(axis=-2)
    return np.concatenate(
        [seq.mean(-2), seq.std(-2), vel.mean(-2), vel.std(-2), foot_h.mean(-2), duty], axis=-1
    )


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("feature statistics need at least 2 samples")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        return cls(feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False)), feats.shape[0])


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid_proxy(stats_a: FeatureStats, stats_b: FeatureStats) -> float:
    """Squared Frechet distance between the Gaussian fits of two feature sets."""
    mu_a, mu_b = np.atleast_1d(stats_a.mean), np.atleast_1d(stats_b.mean)
    ca, cb = np.atleast_2d(stats_a.cov), np.atleast_2d(stats_b.cov)
    if mu_a.shape != mu_b.shape or ca.shape != cb.shape:
        raise ValueError("feature dimensionality mismatch")
    if not all(np.all(np.isfinite(x)) for x in (mu_a, mu_b, ca, cb)):
        raise ValueError("non-finite feature statistics")
    sa = _psd_sqrt(ca)
    mid = sa @ cb @ sa
    w = np.linalg.eigvalsh((mid + mid.T) / 2)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(max(0.0, diff @ diff + np.trace(ca) + np.trace(cb) - 2 * tr_sqrt))


class ActionClassifier(nn.Module):
    """MLP over standardized motion features."""

    def __init__(self, n_features: int, hidden: int = 64, n_classes: int = len(CLASSES)):
        super().__init__()
        self.register_buffer("feat_mean", torch.zeros(n_features, dtype=torch.float64))
        self.register_buffer("feat_std", torch.ones(n_features, dtype=torch.float64))
        self.net = mlp([n_features, hidden, hidden, n_classes]).double()
        self.hidden = hidden

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.net((feats - self.feat_mean) / self.feat_std)

    def predict(self, motions: list[Motion]) -> np.ndarray:
        m0 = motions[0]
        feats = features_batch(np.stack([m.frames for m in motions]), m0.fps, m0.character)
        with torch.no_grad():
            logits = self(torch.as_tensor(feats))
        return logits.argmax(dim=-1).numpy()

    def save(self, path) -> None:
        save_checkpoint(path, self, {"kind": "classifier", "n_features": self.feat_mean.numel(),
                                     "hidden": self.hidden})

    @classmethod
    def load(cls, path) -> "ActionClassifier":
        meta, state = load_checkpoint(path)
        model = cls(meta["n_features"], meta["hidden"])
        model.load_state_dict({k: v.double() for k, v in state.items()})
        return model


def train_classifier(motions: list[Motion], labels: list[str], seed: int = 0,
                     epochs: int = 300, lr: float = 3e-3) -> ActionClassifier:
    torch.manual_seed(seed)
    m0 = motions[0]
    feats = torch.as_tensor(features_batch(np.stack([m.frames for m in motions]), m0.fps, m0.character))
    y = torch.as_tensor([CLASSES.index(l) for l in labels])
    model = ActionClassifier(feats.shape[1])
    model.feat_mean.copy_(feats.mean(0))
    model.feat_std.copy_(feats.std(0).clamp_min(1e-6))
    opt = torch.optim.Adam(model.net.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        loss = nn.functional.cross_entropy(model(feats), y)
        loss.backward()
        opt.step()
    return model


def eval_accuracy(classifier: ActionClassifier, motions: list[Motion], labels: list[str]) -> float:
    if len(motions) == 0:
        raise ValueError("accuracy of an empty motion list is undefined")
    pred = classifier.predict(motions)
    truth = np.array([CLASSES.index(l) for l in labels])
    return float((pred == truth).mean())
