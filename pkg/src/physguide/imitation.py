"""Motion imitation: observations, tracking reward, Gaussian policy, PPO and
the physics-based projection of kinematic motions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .character import N_JOINTS, POSE_DIM, CharacterModel, Pose, body_angles
from .motion import Motion, MotionDataset, frame_velocities, rot_diff, wrap_angle
from .nets import load_checkpoint, mlp, save_checkpoint
from .sim import SimConfig, SimState, step_arrays

ACTION_DIM = N_JOINTS + 3
VALUE_SCALE = 10.0  # value head predicts returns / VALUE_SCALE
N_BODIES = 7


@dataclass(frozen=True)
class RewardWeights:
    w_p: float = 0.6
    w_v: float = 0.1
    w_j: float = 0.2
    w_q: float = 0.1
    a_p: float = 60.0
    a_v: float = 0.2
    a_j: float = 100.0
    a_q: float = 40.0

    def __post_init__(self):
        w = np.array([self.w_p, self.w_v, self.w_j, self.w_q])
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
            raise ValueError("reward weights must be non-negative and sum to 1")

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.w_p, self.w_v, self.w_j, self.w_q])


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    mini_epochs: int = 6
    minibatch: int = 512
    grad_clip: float = 50.0
    n_envs: int = 64
    horizon: int = 32
    epochs: int = 500
    value_coef: float = 0.5
    min_height: float = 0.3
    min_reward: float = 0.05
    psi: float = 1.0

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lambda must lie in (0, 1]")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if self.n_envs < 1 or self.horizon < 1 or self.epochs < 0:
            raise ValueError("n_envs and horizon must be >= 1, epochs >= 0")


@dataclass(frozen=True)
class ActionBaseline:
    """Fixed controller the policy output is added to.

    Joint targets overshoot the reference by ``joint_gain`` times the current
    tracking error; the root wrench starts from a PD servo toward the
    reference root.  Both are clamped with the action by the simulator caps.
    """

    joint_gain: float = 1.0
    root_kp: tuple = (2000.0, 2000.0, 500.0)
    root_kd: tuple = (200.0, 200.0, 50.0)

    def controls(self, action, q, qd, ref_q, ref_qd):
        """(PD targets, residual wrench) for a batch of actions."""
        err = rot_diff(ref_q[..., 3:], q[..., 3:])
        targets = ref_q[..., 3:] + self.joint_gain * err + action[..., :N_JOINTS]
        root_err = np.concatenate([ref_q[..., :2] - q[..., :2], rot_diff(ref_q[..., 2:3], q[..., 2:3])], -1)
        wrench = (np.asarray(self.root_kp) * root_err
                  + np.asarray(self.root_kd) * (ref_qd[..., :3] - qd[..., :3]))
        return targets, wrench + action[..., N_JOINTS:]


# observations and reward

def obs_dim() -> int:
    # root (z, theta, vx, vz, theta_dot), joints, joint velocities, body offsets,
    # target diffs (z, theta, joints, body positions, body angles), psi
    return 5 + N_JOINTS + N_JOINTS + 2 * N_BODIES + (2 + N_JOINTS + 2 * N_BODIES + N_BODIES) + 1


def build_obs_arrays(q, qd, target, psi, character: CharacterModel) -> np.ndarray:
    """Batched observation of shape (..., obs_dim()).

    Everything is expressed relative to the simulated root x, so a common
    horizontal shift of state and target leaves the observation unchanged.
    """
    kin = character.kinematics
    q, qd, target = np.asarray(q), np.asarray(qd), np.asarray(target)
    body = kin.positions(q)[..., kin.com_idx, :]
    body_t = kin.positions(target)[..., kin.com_idx, :]
    rel = body - q[..., None, :2]
    rel_t = body_t - body
    psi = np.broadcast_to(np.asarray(psi, dtype=np.float64), q.shape[:-1])[..., None]
    parts = [
        q[..., 1:2], wrap_angle(q[..., 2:3]), qd[..., :3],
        wrap_angle(q[..., 3:]), qd[..., 3:],
        rel.reshape(*rel.shape[:-2], -1),
        target[..., 1:2] - q[..., 1:2], rot_diff(target[..., 2:3], q[..., 2:3]),
        rot_diff(target[..., 3:], q[..., 3:]),
        rel_t.reshape(*rel_t.shape[:-2], -1),
        rot_diff(body_angles(target, character), body_angles(q, character)),
        psi,
    ]
    return np.concatenate(parts, axis=-1)


def build_obs(state: SimState, target_next: Pose, psi: float = 1.0) -> np.ndarray:
    return build_obs_arrays(state.q, state.qd, target_next.vector(), psi, state.character)


def reward_arrays(q, qd, gt_q, gt_qd, w: RewardWeights, character: CharacterModel):
    """Total reward (...,) and the four sub-rewards (..., 4) in p, v, j, q order."""
    kin = character.kinematics
    e_p = (rot_diff(q[..., 3:], gt_q[..., 3:]) ** 2).sum(-1)
    e_v = ((np.asarray(qd) - gt_qd) ** 2).sum(-1)
    jp = kin.positions(q)[..., kin.joint_idx, :]
    jp_gt = kin.positions(gt_q)[..., kin.joint_idx, :]
    e_j = ((jp - jp_gt) ** 2).sum((-2, -1))
    e_q = (rot_diff(body_angles(q, character), body_angles(gt_q, character)) ** 2).sum(-1)
    sub = np.exp(-np.stack([w.a_p * e_p, w.a_v * e_v, w.a_j * e_j, w.a_q * e_q], axis=-1))
    return sub @ w.weights, sub


def imitation_reward(sim: SimState, gt_pose, gt_velocity, w: RewardWeights = RewardWeights(),
                     character: CharacterModel | None = None):
    """Scalar reward and a dict of the four sub-rewards."""
    character = character or sim.character
    gt_q = gt_pose.vector() if isinstance(gt_pose, Pose) else np.asarray(gt_pose, dtype=np.float64)
    r, sub = reward_arrays(np.asarray(sim.q, dtype=np.float64), sim.qd, gt_q,
                           np.asarray(gt_velocity, dtype=np.float64), w, character)
    return float(r), dict(zip(("r_p", "r_v", "r_j", "r_q"), map(float, sub)))


def gae_advantages(rewards, values, bootstrap, gamma: float, lam: float, dones=None):
    """Advantages and returns along axis 0 (time); extra axes are independent envs.

    ``dones[h]`` marks that the episode ended after step h, cutting the trace.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError(f"rewards {r.shape} and values {v.shape} differ in shape")
    d = np.zeros_like(r) if dones is None else np.asarray(dones, dtype=np.float64)
    nxt = np.asarray(bootstrap, dtype=np.float64)
    adv = np.zeros_like(r)
    last = np.zeros_like(nxt)
    for h in range(r.shape[0] - 1, -1, -1):
        keep = 1.0 - d[h]
        delta = r[h] + gamma * nxt * keep - v[h]
        last = delta + gamma * lam * keep * last
        adv[h] = last
        nxt = v[h]
    return adv, adv + v


# policy

class RunningNorm(nn.Module):
    """Running mean/variance of observations (parallel-merge update)."""

    def __init__(self, dim: int, clip: float = 10.0):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dim, dtype=torch.float64))
        self.register_buffer("var", torch.ones(dim, dtype=torch.float64))
        self.register_buffer("count", torch.tensor(1e-4, dtype=torch.float64))
        self.clip = clip

    def update(self, x: np.ndarray) -> None:
        x = torch.as_tensor(x, dtype=torch.float64).reshape(-1, self.mean.numel())
        n = x.shape[0]
        bm, bv = x.mean(0), x.var(0, unbiased=False)
        tot = self.count + n
        delta = bm - self.mean
        self.mean += delta * n / tot
        self.var.copy_((self.var * self.count + bv * n + delta**2 * self.count * n / tot) / tot)
        self.count.fill_(tot)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = (x.double() - self.mean) / torch.sqrt(self.var + 1e-8)
        return out.clamp(-self.clip, self.clip)


def default_action_std() -> np.ndarray:
    return np.array([0.05] * N_JOINTS + [3.0, 3.0, 1.5])


def default_action_scale() -> np.ndarray:
    return np.array([0.5] * N_JOINTS + [100.0, 100.0, 50.0])


class GaussianPolicy(nn.Module):
    """N(mu(s), diag(std^2)) over (joint target offsets, root force x/z, root torque).

    The network output is multiplied by a fixed per-dimension scale; joint
    targets are the reference's next joint angles plus the first six action
    entries.
    """

    def __init__(self, n_obs: int, hidden: Sequence[int] = (256, 256), std=None, scale=None,
                 dtype=torch.float32):
        super().__init__()
        self.hidden = tuple(int(h) for h in hidden)
        self.norm = RunningNorm(n_obs)
        self.mu_net = mlp([n_obs, *self.hidden, ACTION_DIM]).to(dtype)
        self.value_net = mlp([n_obs, *self.hidden, 1]).to(dtype)
        with torch.no_grad():
            self.mu_net[-1].weight.mul_(0.01)
            self.mu_net[-1].bias.zero_()
        std = default_action_std() if std is None else np.asarray(std, dtype=np.float64)
        scale = default_action_scale() if scale is None else np.asarray(scale, dtype=np.float64)
        if np.any(std <= 0):
            raise ValueError("policy std entries must be positive")
        self.register_buffer("std", torch.as_tensor(std, dtype=dtype))
        self.register_buffer("scale", torch.as_tensor(scale, dtype=dtype))
        self.dtype = dtype

    def mean(self, obs_n: torch.Tensor) -> torch.Tensor:
        return self.mu_net(obs_n.to(self.dtype)) * self.scale

    def value(self, obs_n: torch.Tensor) -> torch.Tensor:
        return self.value_net(obs_n.to(self.dtype))[..., 0] * VALUE_SCALE

    def log_prob(self, obs_n: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        z = (action.to(self.dtype) - self.mean(obs_n)) / self.std
        return (-0.5 * z**2 - torch.log(self.std) - 0.5 * math.log(2 * math.pi)).sum(-1)

    def act(self, obs: np.ndarray, mode: str = "mean", rng: np.random.Generator | None = None):
        """Return (action, normalized obs, log-prob, value) for raw observations."""
        with torch.no_grad():
            obs_n = self.norm(torch.as_tensor(obs))
            mu = self.mean(obs_n)
            if mode == "mean":
                a = mu.double()
            elif mode == "stochastic":
                noise = torch.as_tensor(rng.standard_normal(tuple(mu.shape)))
                a = mu.double() + noise * self.std.double()
            else:
                raise ValueError(f"unknown action mode {mode!r}")
            logp = self.log_prob(obs_n, a)
            v = self.value(obs_n)
        return a.numpy(), obs_n.numpy(), logp.double().numpy(), v.double().numpy()


@dataclass
class Policy:
    net: GaussianPolicy
    sim: SimConfig = field(default_factory=SimConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    baseline: ActionBaseline = field(default_factory=ActionBaseline)
    character: CharacterModel = field(default_factory=CharacterModel)
    history: list = field(default_factory=list)  # per-epoch dicts
    seed: int = 0

    def save(self, path) -> None:
        meta = {
            "kind": "policy",
            "n_obs": self.net.norm.mean.numel(),
            "layer_sizes": list(self.net.hidden),
            "std": self.net.std.tolist(),
            "scale": self.net.scale.tolist(),
            "sim_config": self.sim.to_dict(),
            "ppo_config": asdict(self.ppo),
            "reward_weights": asdict(self.reward),
            "action_baseline": asdict(self.baseline),
            "character": self.character.to_dict(),
            "history": self.history,
            "seed": self.seed,
            # float64 copies; the float32 binary would round them
            "obs_norm": {"mean": self.net.norm.mean.tolist(), "var": self.net.norm.var.tolist(),
                         "count": float(self.net.norm.count)},
        }
        save_checkpoint(path, self.net, meta)

    @classmethod
    def load(cls, path) -> "Policy":
        meta, state = load_checkpoint(path)
        if meta.get("kind") != "policy":
            raise ValueError(f"{path} is not a policy checkpoint")
        net = GaussianPolicy(meta["n_obs"], meta["layer_sizes"], meta["std"], meta["scale"])
        state = {k: (v.double() if k.startswith("norm.") else v) for k, v in state.items()}
        net.load_state_dict(state)
        norm = meta["obs_norm"]
        net.norm.mean.copy_(torch.tensor(norm["mean"], dtype=torch.float64))
        net.norm.var.copy_(torch.tensor(norm["var"], dtype=torch.float64))
        net.norm.count.fill_(norm["count"])
        return cls(net, SimConfig.from_dict(meta["sim_config"]), PPOConfig(**meta["ppo_config"]),
                   RewardWeights(**meta["reward_weights"]),
                   ActionBaseline(**{k: tuple(v) if isinstance(v, list) else v
                                     for k, v in meta["action_baseline"].items()}),
                   CharacterModel.from_dict(meta["character"]),
                   meta.get("history", []), meta.get("seed", 0))


def _lift_out_of_ground(q: np.ndarray, character: CharacterModel) -> np.ndarray:
    """Raise root z so no contact point starts below the ground."""
    kin = character.kinematics
    zmin = kin.positions(q)[..., kin.contact_idx, 1].min(-1)
    q = q.copy()
    q[..., 1] -= np.minimum(zmin, 0.0)
    return q


# training

class _Envs:
    """Batched reference-state-initialized imitation episodes."""

    def __init__(self, frames: np.ndarray, fps: float, n: int, policy: Policy, rng):
        self.frames = frames
        self.vel = frame_velocities(frames, fps)
        self.n, self.p, self.rng = n, policy, rng
        self.H = frames.shape[1]
        self.m = np.zeros(n, dtype=int)
        self.h = np.zeros(n, dtype=int)
        self.t = np.zeros(n, dtype=int)
        self.q = np.zeros((n, POSE_DIM))
        self.qd = np.zeros((n, POSE_DIM))
        self.reset(np.ones(n, dtype=bool))

    def reset(self, rows: np.ndarray) -> None:
        k = int(rows.sum())
        if k == 0:
            return
        self.m[rows] = self.rng.integers(0, self.frames.shape[0], k)
        self.h[rows] = self.rng.integers(0, self.H - 1, k)
        self.t[rows] = 0
        q = self.frames[self.m[rows], self.h[rows]]
        self.q[rows] = _lift_out_of_ground(q, self.p.character)
        self.qd[rows] = self.vel[self.m[rows], self.h[rows]]

    def target(self) -> np.ndarray:
        # at the end of a reference clip (bootstrap only) the last frame stands in
        return self.frames[self.m, np.minimum(self.h + 1, self.H - 1)]

    def obs(self) -> np.ndarray:
        return build_obs_arrays(self.q, self.qd, self.target(), self.p.ppo.psi, self.p.character)

    def step(self, action: np.ndarray):
        gt_q, gt_qd = self.target(), self.vel[self.m, self.h + 1]
        targets, wrench = self.p.baseline.controls(action, self.q, self.qd, gt_q, gt_qd)
        q, qd, bad, _ = step_arrays(self.q, self.qd, targets, wrench, self.p.character, self.p.sim)
        with np.errstate(all="ignore"):
            r, sub = reward_arrays(q, qd, gt_q, gt_qd, self.p.reward, self.p.character)
        r = np.where(bad, 0.0, r)
        sub = np.where(bad[:, None], 0.0, sub)
        self.q, self.qd = q, qd
        self.h += 1
        self.t += 1
        fell = bad | (np.nan_to_num(q[:, 1], nan=-1.0) < self.p.ppo.min_height) | (r < self.p.ppo.min_reward)
        timeout = ~fell & ((self.h >= self.H - 1) | (self.t >= self.p.ppo.horizon))
        return r, sub, fell, timeout


def _policy_update(net: GaussianPolicy, opt, batch: dict, cfg: PPOConfig, rng) -> dict:
    n = batch["obs"].shape[0]
    obs = torch.as_tensor(batch["obs"])
    act = torch.as_tensor(batch["act"])
    old_logp = torch.as_tensor(batch["logp"])
    adv = torch.as_tensor(batch["adv"])
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    ret = torch.as_tensor(batch["ret"])
    params = list(net.mu_net.parameters()) + list(net.value_net.parameters())
    stats = {"pg": 0.0, "vf": 0.0, "clipfrac": 0.0}
    count = 0
    for _ in range(cfg.mini_epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = torch.as_tensor(perm[start:start + cfg.minibatch])
            ratio = torch.exp(net.log_prob(obs[idx], act[idx]).double() - old_logp[idx])
            surr = torch.minimum(ratio * adv[idx], ratio.clamp(1 - cfg.clip, 1 + cfg.clip) * adv[idx])
            pg = -surr.mean()
            vf = (((net.value(obs[idx]).double() - ret[idx]) / VALUE_SCALE) ** 2).mean()
            loss = pg + cfg.value_coef * vf
            if not torch.isfinite(loss):
                raise FloatingPointError("non-finite PPO loss")
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            stats["pg"] += pg.item()
            stats["vf"] += vf.item()
            stats["clipfrac"] += ((ratio - 1).abs() > cfg.clip).double().mean().item()
            count += 1
    return {k: v / max(count, 1) for k, v in stats.items()}


class PolicyTrainingFailed(RuntimeError):
    def __init__(self, epoch: int, policy: Policy, cause: Exception):
        super().__init__(f"policy training failed at epoch {epoch}: {cause}")
        self.epoch, self.policy, self.cause = epoch, policy, cause


def train_policy(dataset: MotionDataset, sim: SimConfig = SimConfig(), ppo: PPOConfig = PPOConfig(),
                 reward: RewardWeights = RewardWeights(), seed: int = 0,
                 baseline: ActionBaseline = ActionBaseline(), log_every: int = 0) -> Policy:
    """PPO with GAE on reference-state-initialized episodes.

    History holds one dict per epoch with the mean reward, the mean
    sub-rewards and the mean completed-episode length.  If a loss or weight
    turns non-finite, PolicyTrainingFailed carries the last good policy.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    frames = dataset.frames_array()
    if frames.shape[1] < 2:
        raise ValueError("reference motions need at least 2 frames")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = GaussianPolicy(obs_dim())
    policy = Policy(net, sim, ppo, reward, baseline, dataset.character, [], seed)
    opt = torch.optim.Adam(list(net.mu_net.parameters()) + list(net.value_net.parameters()), lr=ppo.lr)
    envs = _Envs(frames, dataset.motions[0].fps, ppo.n_envs, policy, rng)
    good_state = {k: v.clone() for k, v in net.state_dict().items()}
    for epoch in range(ppo.epochs):
        buf = {k: [] for k in ("obs", "act", "logp", "val", "rew", "done", "sub", "raw", "r")}
        ep_lens = []
        for _ in range(ppo.horizon):
            raw = envs.obs()
            a, obs_n, logp, v = net.act(raw, "stochastic", rng)
            r, sub, fell, timeout = envs.step(a)
            r_boot = r.copy()
            if np.any(timeout):
                _, nxt_n, _, nxt_v = net.act(envs.obs(), "mean")
                r_boot = np.where(timeout, r + ppo.gamma * nxt_v, r)
            done = fell | timeout
            for k, x in zip(buf, (obs_n, a, logp, v, r_boot, done, sub, raw, r)):
                buf[k].append(x)
            ep_lens.extend(envs.t[done].tolist())
            envs.reset(done)
        _, _, _, boot = net.act(envs.obs(), "mean")
        arr = {k: np.stack(v) for k, v in buf.items()}
        adv, ret = gae_advantages(arr["rew"], arr["val"], boot, ppo.gamma, ppo.lam, arr["done"])
        batch = {
            "obs": arr["obs"].reshape(-1, arr["obs"].shape[-1]),
            "act": arr["act"].reshape(-1, ACTION_DIM),
            "logp": arr["logp"].reshape(-1),
            "adv": adv.reshape(-1),
            "ret": ret.reshape(-1),
        }
        try:
            stats = _policy_update(net, opt, batch, ppo, rng)
            if not all(torch.all(torch.isfinite(p)) for p in net.parameters()):
                raise FloatingPointError("non-finite policy weights")
        except FloatingPointError as err:
            net.load_state_dict(good_state)
            raise PolicyTrainingFailed(epoch, policy, err) from err
        # normalization statistics follow the update so stored obs stay consistent
        net.norm.update(arr["raw"])
        good_state = {k: v.clone() for k, v in net.state_dict().items()}
        sub_mean = arr["sub"].reshape(-1, 4).mean(0)
        policy.history.append({
            "epoch": epoch,
            "mean_reward": float(arr["r"].mean()),
            "r_p": float(sub_mean[0]), "r_v": float(sub_mean[1]),
            "r_j": float(sub_mean[2]), "r_q": float(sub_mean[3]),
            "episode_length": float(np.mean(ep_lens)) if ep_lens else float(ppo.horizon),
            **stats,
        })
        if log_every and epoch % log_every == 0:
            h = policy.history[-1]
            print(f"epoch {epoch:4d}  reward {h['mean_reward']:.3f}  len {h['episode_length']:.1f}  "
                  f"vf {h['vf']:.3f}")
    return policy



# projection

@dataclass
class ProjectionBatch:
    motions: list[Motion]
    failed: np.ndarray  # (B,) bool, input returned unchanged
    resets: np.ndarray  # (B,) divergence re-initializations
    rewards: np.ndarray  # (B, H-1) tracking reward per simulated step
    forces: np.ndarray | None = None  # (H-1, B, 8, 2) contact forces, if recorded


MAX_RESETS = 3


def project_motions(policy: Policy, motions: Sequence[Motion], mode: str = "mean", seed: int = 0,
                    record_forces: bool = False) -> ProjectionBatch:
    """Track each motion in the simulator and return the simulated motions.

    The rollout starts from frame 0 (lifted out of the ground if needed) and
    frame h+1 of the output is the simulated pose after tracking target
    h+1.  A diverging rollout, or one that falls by the training criterion
    (root below min_height or step reward below min_reward), restarts from
    the input frame it was aiming at; after more than MAX_RESETS restarts the input is returned unchanged
    and flagged as failed.
    """
    motions = list(motions)
    if not motions:
        return ProjectionBatch([], np.zeros(0, bool), np.zeros(0, int), np.zeros((0, 0)))
    H = motions[0].H
    if H < 2 or any(m.H != H for m in motions):
        raise ValueError("projection needs motions of a common length H >= 2")
    ch, fps = policy.character, motions[0].fps
    ref = np.stack([m.frames for m in motions]).astype(np.float64)
    vel = frame_velocities(ref, fps)
    rng = np.random.default_rng(seed)
    B = len(motions)
    q = _lift_out_of_ground(ref[:, 0], ch)
    qd = vel[:, 0].copy()
    out = np.zeros_like(ref)
    out[:, 0] = q
    resets = np.zeros(B, dtype=int)
    rewards = np.zeros((B, H - 1))
    forces = [] if record_forces else None
    for h in range(H - 1):
        tgt, tv = ref[:, h + 1], vel[:, h + 1]
        obs = build_obs_arrays(q, qd, tgt, policy.ppo.psi, ch)
        a, _, _, _ = policy.net.act(obs, mode, rng)
        targets, wrench = policy.baseline.controls(a, q, qd, tgt, tv)
        q, qd, bad, fc = step_arrays(q, qd, targets, wrench, ch, policy.sim)
        with np.errstate(invalid="ignore"):
            r = reward_arrays(q, qd, tgt, tv, policy.reward, ch)[0]
        # a fall by the training criterion counts as a divergence
        bad = bad | (np.nan_to_num(q[:, 1], nan=-1.0) < policy.ppo.min_height) | ~(r >= policy.ppo.min_reward)
        if np.any(bad):
            resets += bad
            q[bad] = _lift_out_of_ground(tgt[bad], ch)
            qd[bad] = tv[bad]
            fc[bad] = 0.0
        rewards[:, h] = np.where(bad, 0.0, r)
        out[:, h + 1] = q
        if record_forces:
            forces.append(fc)
    failed = resets > MAX_RESETS
    result = []
    for i, m in enumerate(motions):
        result.append(m if failed[i] else Motion(out[i], fps, m.condition, m.character))
    return ProjectionBatch(result, failed, resets, rewards,
                           np.stack(forces) if record_forces else None)


def project_motion(policy: Policy, motion: Motion, mode: str = "mean", seed: int = 0):
    """Project one motion; returns (motion, failed)."""
    res = project_motions(policy, [motion], mode, seed)
    return res.motions[0], bool(res.failed[0])


class Projector:
    """Callable projection for the sampler; keeps failure counts."""

    def __init__(self, policy: Policy, mode: str = "mean", seed: int = 0):
        self.policy, self.mode, self.seed = policy, mode, seed
        self.calls = 0
        self.failures = 0

    def __call__(self, motions: list[Motion]) -> list[Motion]:
        res = project_motions(self.policy, motions, self.mode, self.seed + self.calls)
        self.calls += 1
        self.failures += int(res.failed.sum())
        return res.motions


def evaluate_policy(policy: Policy, motions: Sequence[Motion], mode: str = "mean") -> float:
    """Mean per-step tracking reward over full-length projections."""
    return float(project_motions(policy, motions, mode).rewards.mean())
