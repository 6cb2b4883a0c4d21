"""MLP motion denoiser D(x, sigma, c), its data representation and training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .character import POSE_DIM, CharacterModel
from .motion import CLASSES, NULL_INDEX, Condition, Motion, MotionDataset
from .nets import load_checkpoint, mlp, save_checkpoint

N_SLOTS = len(CLASSES) + 1  # class one-hot plus the null slot
N_COND = len(CLASSES)  # the null slot is the all-zero condition vector


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    cond_dropout: float = 0.1
    grad_clip: float = 50.0
    sigma_min_ratio: float = 0.02
    sigma_max_ratio: float = 8.0
    hidden: tuple = (512, 512, 512)
    early_stop_patience: int = 0  # epochs without improvement; 0 disables
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError("cond_dropout must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or not self.lr > 0:
            raise ValueError("batch_size and lr must be positive, epochs non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def sigma_features(sigma: torch.Tensor, n: int = 16) -> torch.Tensor:
    """n sinusoidal features of log sigma.

    Frequencies run from 1/16 to 1 radian per unit of log sigma, slow enough
    that the features stay smooth across the few units the schedule spans.
    """
    freqs = torch.exp(torch.linspace(math.log(1 / 16), 0.0, n // 2, dtype=sigma.dtype))
    arg = torch.log(sigma)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


class MotionDenoiser(nn.Module):
    """Predicts the clean (normalized) motion from a noisy one.

    Input is c_in * x with c_in = 1 / sqrt(sigma^2 + sigma_data^2), followed by
    the noise-level features and the condition one-hot.  The final layer has
    no bias, so an all-zero network returns the zero motion.
    """

    def __init__(self, H: int, pose_dim: int = POSE_DIM, hidden: Sequence[int] = (512, 512, 512),
                 n_freq: int = 16, sigma_data: float = 1.0):
        super().__init__()
        self.H, self.pose_dim, self.n_freq = H, pose_dim, n_freq
        self.hidden = tuple(int(h) for h in hidden)
        self.sigma_data = float(sigma_data)
        d = H * pose_dim
        self.net = mlp([d + n_freq + N_COND, *self.hidden, d], final_bias=False)
        # condition columns start at zero so the initial model is unconditional
        with torch.no_grad():
            self.net[0].weight[:, d + n_freq:] = 0.0

    def forward(self, x: torch.Tensor, sigma: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x.shape[1:] != (self.H, self.pose_dim):
            raise ValueError(f"expected (B, {self.H}, {self.pose_dim}) input, got {tuple(x.shape)}")
        B = x.shape[0]
        sigma = sigma.to(x.dtype).expand(B) if sigma.dim() == 0 else sigma.to(x.dtype)
        c_in = 1.0 / torch.sqrt(sigma**2 + self.sigma_data**2)
        onehot = nn.functional.one_hot(cond.long(), N_SLOTS)[:, :N_COND].to(x.dtype)
        h = torch.cat([c_in[:, None] * x.reshape(B, -1), sigma_features(sigma, self.n_freq), onehot], -1)
        return self.net(h).reshape(x.shape)


def denoiser_loss(model: MotionDenoiser, x: torch.Tensor, sigma: torch.Tensor,
                  eps: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Mean squared reconstruction error of D(x + sigma eps, sigma, c) with unit weighting."""
    noisy = x + sigma.reshape(-1, 1, 1) * eps
    return ((model(noisy, sigma, cond) - x) ** 2).mean()


@dataclass
class Normalizer:
    """Per-dimension standardization with root x replaced by per-frame deltas."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames: np.ndarray) -> "Normalizer":
        r = to_deltas(frames).reshape(-1, frames.shape[-1])
        return cls(r.mean(axis=0), np.maximum(r.std(axis=0), 1e-3))

    def encode(self, frames: np.ndarray) -> np.ndarray:
        return (to_deltas(frames) - self.mean) / self.std

    def decode(self, x: np.ndarray) -> np.ndarray:
        return from_deltas(np.asarray(x, dtype=np.float64) * self.std + self.mean)


def to_deltas(frames: np.ndarray) -> np.ndarray:
    r = np.array(frames, dtype=np.float64)
    r[..., 1:, 0] = np.diff(r[..., 0], axis=-1)
    r[..., 0, 0] = 0.0
    return r


def from_deltas(r: np.ndarray) -> np.ndarray:
    f = np.array(r, dtype=np.float64)
    f[..., 0, 0] = 0.0
    f[..., 0] = np.cumsum(f[..., 0], axis=-1)
    return f


@dataclass
class Denoiser:
    """A trained network with its normalization; also the sampler's motion codec."""

    model: MotionDenoiser
    norm: Normalizer
    sigma_min: float
    sigma_max: float
    character: CharacterModel = field(default_factory=CharacterModel)
    fps: float = 30.0
    config: TrainConfig = field(default_factory=TrainConfig)
    loss_history: list = field(default_factory=list)

    @property
    def H(self) -> int:
        return self.model.H

    def shape(self, H: int) -> tuple[int, int]:
        if H != self.model.H:
            raise ValueError(f"this denoiser was trained for H = {self.model.H}, not {H}")
        return (H, self.model.pose_dim)

    def __call__(self, x: np.ndarray, sigma: float, cond) -> np.ndarray:
        x = np.asarray(x)
        with torch.no_grad():
            out = self.model(torch.as_tensor(x, dtype=torch.float32),
                             torch.tensor(float(sigma), dtype=torch.float32),
                             torch.as_tensor(np.broadcast_to(cond, x.shape[:1]).copy()))
        return out.numpy().astype(np.float64)

    def encode(self, motions: Sequence[Motion]) -> np.ndarray:
        return self.norm.encode(np.stack([m.frames for m in motions]))

    def decode(self, x: np.ndarray, conditions: Sequence[Condition]) -> list[Motion]:
        frames = self.norm.decode(x)
        return [Motion(f, self.fps, c, self.character) for f, c in zip(frames, conditions)]

    def save(self, path) -> None:
        meta = {
            "kind": "denoiser",
            "dims": {"H": self.model.H, "pose_dim": self.model.pose_dim, "n_classes": len(CLASSES)},
            "layer_sizes": list(self.model.hidden),
            "n_freq": self.model.n_freq,
            "sigma_data": self.model.sigma_data,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
            "normalization": {"mean": self.norm.mean.tolist(), "std": self.norm.std.tolist()},
            "fps": self.fps,
            "character": self.character.to_dict(),
            "training_config": self.config.to_dict(),
            "seed": self.config.seed,
            "loss_history": [float(v) for v in self.loss_history],
        }
        save_checkpoint(path, self.model, meta)

    @classmethod
    def load(cls, path) -> "Denoiser":
        meta, state = load_checkpoint(path)
        if meta.get("kind") != "denoiser":
            raise ValueError(f"{path} is not a denoiser checkpoint")
        dims = meta["dims"]
        model = MotionDenoiser(dims["H"], dims["pose_dim"], meta["layer_sizes"],
                               meta["n_freq"], meta["sigma_data"])
        model.load_state_dict(state)
        norm = Normalizer(np.array(meta["normalization"]["mean"]), np.array(meta["normalization"]["std"]))
        return cls(model.eval(), norm, meta["sigma_min"], meta["sigma_max"],
                   CharacterModel.from_dict(meta["character"]), meta["fps"],
                   TrainConfig.from_dict(meta["training_config"]), meta.get("loss_history", []))


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch_seed: list, last_finite: float | None):
        super().__init__(f"non-finite loss at epoch {epoch} (batch seed {batch_seed}); "
                         f"last finite loss {last_finite}")
        self.epoch, self.batch_seed, self.last_finite = epoch, batch_seed, last_finite


def _labels_to_index(labels) -> np.ndarray:
    return np.array([NULL_INDEX if l is None else CLASSES.index(l) for l in labels])


def train_denoiser(dataset: MotionDataset, config: TrainConfig = TrainConfig(),
                   log_every: int = 0, normalizer: Normalizer | None = None) -> Denoiser:
    """Fit the denoiser with log-uniform sigma sampling and condition dropout.

    Each batch draws its noise from ``default_rng([seed, epoch, batch])`` so a
    failing batch can be replayed from the seed reported on divergence.
    ``normalizer`` defaults to one fitted on the dataset; pass one fitted
    elsewhere when the dataset itself has no spread.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    frames = dataset.frames_array()
    if frames.ndim != 3:
        raise ValueError("all motions must share the same length")
    torch.manual_seed(config.seed)
    norm = normalizer if normalizer is not None else Normalizer.fit(frames)
    data = norm.encode(frames)
    sigma_data = float(data.std())
    if not sigma_data > 0:
        raise ValueError("normalized data has zero spread; pass a normalizer fitted on varied data")
    sig_lo, sig_hi = config.sigma_min_ratio * sigma_data, config.sigma_max_ratio * sigma_data
    model = MotionDenoiser(frames.shape[1], frames.shape[2], config.hidden, sigma_data=sigma_data)
    labels = _labels_to_index(dataset.labels)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    x_all = torch.as_tensor(data, dtype=torch.float32)
    c_all = torch.as_tensor(labels)
    history: list[float] = []
    best, stale = math.inf, 0
    order_rng = np.random.default_rng([config.seed, 1])
    n = len(data)
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            brng = np.random.default_rng([config.seed, epoch, b])
            sigma = np.exp(brng.uniform(np.log(sig_lo), np.log(sig_hi), len(idx)))
            eps = brng.standard_normal((len(idx), *data.shape[1:]))
            cond = c_all[idx].clone()
            cond[torch.as_tensor(brng.random(len(idx)) < config.cond_dropout)] = NULL_INDEX
            loss = denoiser_loss(model, x_all[idx], torch.as_tensor(sigma, dtype=torch.float32),
                                 torch.as_tensor(eps, dtype=torch.float32), cond)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, [config.seed, epoch, b], history[-1] if history else None)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / n)
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch:5d}  loss {history[-1]:.5f}")
        if config.early_stop_patience:
            if history[-1] < best - 1e-6:
                best, stale = history[-1], 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    break
    return Denoiser(model.eval(), norm, sig_lo, sig_hi, dataset.character,
                    dataset.motions[0].fps, config, history)


def validation_loss(den: Denoiser, motions: Sequence[Motion], sigma: float, seed: int = 0) -> float:
    """Mean squared error (normalized units) of the conditional denoiser at one noise level."""
    x = den.encode(motions)
    eps = np.random.default_rng(seed).standard_normal(x.shape)
    cond = _labels_to_index([m.condition.label for m in motions])
    return float(((den(x + sigma * eps, sigma, cond) - x) ** 2).mean())


def zero_predictor_loss(den: Denoiser, motions: Sequence[Motion]) -> float:
    return float((den.encode(motions) ** 2).mean())
