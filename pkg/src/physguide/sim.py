"""Deterministic planar articulated-body simulator with penalty ground contact.

Dynamics are written in generalized coordinates (root x, z, theta and six
joint angles), so body placements always equal forward kinematics of the
state.  Each substep is a linearly-implicit Euler step: stiff terms (PD
servos, joint limits, contact springs/dampers, viscous friction) enter the
velocity solve through their Jacobians, everything else is explicit, and
positions are advanced with the new velocities.  The horizontal root
velocity is then corrected so that total horizontal momentum changes only
by the applied external horizontal impulse (x is a cyclic coordinate).

All array functions accept any leading batch shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .character import N_JOINTS, POSE_DIM, CharacterModel, Pose, body_angles
from .motion import Motion, frame_velocities, rot_diff, wrap_angle

N_CONTACTS = 8


class SimulationDiverged(RuntimeError):
    def __init__(self, quantity: str, value: float):
        super().__init__(f"simulation diverged: {quantity} = {value}")
        self.quantity = quantity
        self.value = value


def _default_kp():
    return np.array([300.0, 300.0, 100.0, 300.0, 300.0, 100.0])


def _default_kd():
    return np.array([15.0, 15.0, 5.0, 15.0, 15.0, 5.0])


@dataclass(frozen=True)
class SimConfig:
    sim_hz: float = 60.0
    control_hz: float = 30.0
    gravity: float = 9.81
    contact_stiffness: float = 2e5
    contact_damping: float = 1e3
    friction_coef: float = 0.9
    friction_damping: float = 1e3
    kp: np.ndarray = field(default_factory=_default_kp)
    kd: np.ndarray = field(default_factory=_default_kd)
    torque_limit: float = 200.0
    residual_force_cap: float = 200.0
    residual_torque_cap: float = 100.0
    limit_stiffness: float = 2000.0
    limit_damping: float = 50.0
    max_speed: float = 100.0
    contacts: bool = True

    def __post_init__(self):
        if self.sim_hz <= 0 or self.control_hz <= 0:
            raise ValueError("rates must be positive")
        ratio = self.sim_hz / self.control_hz
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("sim rate must be an integer multiple of the control rate")
        object.__setattr__(self, "kp", np.asarray(self.kp, dtype=np.float64))
        object.__setattr__(self, "kd", np.asarray(self.kd, dtype=np.float64))

    @property
    def substeps(self) -> int:
        return int(round(self.sim_hz / self.control_hz))

    @property
    def dt(self) -> float:
        return 1.0 / self.sim_hz

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["kp"] = self.kp.tolist()
        d["kd"] = self.kd.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(**d)


@dataclass(frozen=True)
class Action:
    """PD targets for the six joints plus a residual root wrench (fx, fz, torque)."""

    targets: np.ndarray
    residual: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=np.float64))
        object.__setattr__(self, "residual", np.asarray(self.residual, dtype=np.float64))
        if self.targets.shape[-1:] != (N_JOINTS,) or self.residual.shape[-1:] != (3,):
            raise ValueError("an action needs 6 joint targets and a 3-entry residual wrench")


@dataclass(frozen=True)
class SimState:
    """Generalized position/velocity of the character and the simulation clock."""

    q: np.ndarray
    qd: np.ndarray
    time: float = 0.0
    character: CharacterModel = field(default_factory=CharacterModel)

    @property
    def joint_angles(self) -> np.ndarray:
        return self.q[..., 3:]

    @property
    def joint_velocities(self) -> np.ndarray:
        return self.qd[..., 3:]

    @property
    def body_positions(self) -> np.ndarray:
        kin = self.character.kinematics
        return kin.positions(self.q)[..., kin.com_idx, :]

    @property
    def body_orientations(self) -> np.ndarray:
        return body_angles(self.q, self.character)

    @property
    def body_linear_velocities(self) -> np.ndarray:
        kin = self.character.kinematics
        _, jac, _ = kin.jacobians(self.q, self.qd)
        return np.einsum("...pcd,...d->...pc", jac[..., kin.com_idx, :, :], self.qd)

    @property
    def body_angular_velocities(self) -> np.ndarray:
        return self.qd @ self.character.kinematics.body_masks.T


def init_state_from_motion(motion: Motion, frame: int) -> SimState:
    if not -motion.H <= frame < motion.H:
        raise IndexError(f"frame {frame} out of range for motion of length {motion.H}")
    q = motion.frames[frame].astype(np.float64)
    if motion.H == 1:
        qd = np.zeros(POSE_DIM)
    else:
        qd = frame_velocities(motion.frames, motion.fps)[frame]
    return SimState(q, qd, frame / motion.fps, motion.character)


def extract_pose(state: SimState) -> Pose:
    q = np.array(state.q, dtype=np.float64)
    q[2:] = wrap_angle(q[2:])
    return Pose.from_vector(q)


def pd_torques(q_joint, qd_joint, targets, kp, kd, torque_limit):
    """Clamped PD torque per joint."""
    raw = kp * rot_diff(targets, q_joint) - kd * np.asarray(qd_joint)
    return np.clip(raw, -torque_limit, torque_limit)


def _contact_terms(pos, vel, cfg: SimConfig):
    z, vz, vx = pos[..., 1], vel[..., 1], vel[..., 0]
    below = z < 0.0
    normal = np.where(below, np.maximum(0.0, -cfg.contact_stiffness * z - cfg.contact_damping * vz), 0.0)
    cap = cfg.friction_coef * normal
    viscous = cfg.friction_damping * vx
    fx = -np.clip(viscous, -cap, cap)
    active = normal > 0.0
    sticking = active & (np.abs(viscous) < cap)
    # friction as a damper: k_t while sticking, cap/|v_x| once saturated
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        damping = np.where(sticking, cfg.friction_damping, np.where(active, cap / np.abs(vx), 0.0))
    return fx, normal, active, damping


def contact_forces(state: SimState, config: SimConfig) -> np.ndarray:
    """Force on each contact point as (..., 8, 2) rows of (f_x, N)."""
    kin = state.character.kinematics
    pos, jac, _ = kin.jacobians(state.q, state.qd)
    idx = kin.contact_idx
    vel = np.einsum("...pcd,...d->...pc", jac[..., idx, :, :], state.qd)
    fx, normal, _, _ = _contact_terms(pos[..., idx, :], vel, config)
    return np.stack([fx, normal], axis=-1)


def _mass_matrix(jac_com, kin):
    m, inert, masks = kin.masses, kin.inertias, kin.body_masks
    lin = np.einsum("b,...bci,...bcj->...ij", m, jac_com, jac_com)
    return lin + np.einsum("b,bi,bj->ij", inert, masks, masks)


def _x_momentum_row(q, kin):
    """Row of the mass matrix for the root-x coordinate at configuration q."""
    _, jac, _ = kin.jacobians(q, np.zeros_like(q))
    return np.einsum("b,...bd->...d", kin.masses, jac[..., kin.com_idx, 0, :])


def substep(q, qd, targets, residual, character: CharacterModel, cfg: SimConfig):
    """One implicit-Euler substep on batched arrays; returns (q, qd, contact forces)."""
    kin = character.kinematics
    dt, g = cfg.dt, cfg.gravity
    pos, jac, bias = kin.jacobians(q, qd)
    jc = jac[..., kin.com_idx, :, :]
    M = _mass_matrix(jc, kin)
    coriolis = np.einsum("b,...bci,...bc->...i", kin.masses, jc, bias[..., kin.com_idx, :])
    force = -g * np.einsum("b,...bi->...i", kin.masses, jc[..., :, 1, :]) - coriolis

    batch = q.shape[:-1]
    D = np.zeros(batch + (POSE_DIM, POSE_DIM))
    K = np.zeros_like(D)
    jdiag = np.arange(3, POSE_DIM)

    # PD servos
    qj, qdj = q[..., 3:], qd[..., 3:]
    raw = cfg.kp * rot_diff(targets, qj) - cfg.kd * qdj
    free = np.abs(raw) <= cfg.torque_limit
    force[..., 3:] += np.clip(raw, -cfg.torque_limit, cfg.torque_limit)
    K[..., jdiag, jdiag] -= np.where(free, cfg.kp, 0.0)
    D[..., jdiag, jdiag] -= np.where(free, cfg.kd, 0.0)

    # joint limit springs
    lim = character.joint_limits
    excess = np.where(qj > lim[:, 1], qj - lim[:, 1], np.where(qj < lim[:, 0], qj - lim[:, 0], 0.0))
    hit = excess != 0.0
    force[..., 3:] += np.where(hit, -cfg.limit_stiffness * excess - cfg.limit_damping * qdj, 0.0)
    K[..., jdiag, jdiag] -= np.where(hit, cfg.limit_stiffness, 0.0)
    D[..., jdiag, jdiag] -= np.where(hit, cfg.limit_damping, 0.0)

    # residual root wrench
    ext_x = residual[..., 0].copy()
    force[..., :3] += residual

    fc = np.zeros(batch + (N_CONTACTS, 2))
    if cfg.contacts:
        jp = jac[..., kin.contact_idx, :, :]
        vel = np.einsum("...pcd,...d->...pc", jp, qd)
        fx, normal, active, damping = _contact_terms(pos[..., kin.contact_idx, :], vel, cfg)
        fc = np.stack([fx, normal], axis=-1)
        force += np.einsum("...pcd,...pc->...d", jp, fc)
        ext_x = ext_x + fx.sum(axis=-1)
        jz, jx = jp[..., 1, :], jp[..., 0, :]
        kz = np.where(active, cfg.contact_stiffness, 0.0)
        cz = np.where(active, cfg.contact_damping, 0.0)
        # saturated friction is also implicit so it can slow a sliding foot but never reverse it
        ct = damping
        K -= np.einsum("...p,...pi,...pj->...ij", kz, jz, jz)
        D -= np.einsum("...p,...pi,...pj->...ij", cz, jz, jz)
        D -= np.einsum("...p,...pi,...pj->...ij", ct, jx, jx)

    A = M - dt * D - dt * dt * K
    rhs = np.einsum("...ij,...j->...i", M, qd) + dt * (force - np.einsum("...ij,...j->...i", D, qd))
    v = np.linalg.solve(A, rhs[..., None])[..., 0]

    # horizontal momentum bookkeeping
    p_old = np.einsum("...i,...i->...", M[..., 0, :], qd)
    implicit_x = (
        np.einsum("...i,...i->...", D[..., 0, :], v - qd)
        + dt * np.einsum("...i,...i->...", K[..., 0, :], v)
    )
    p_new = p_old + dt * (ext_x + implicit_x)
    q_new = q + dt * v
    row = _x_momentum_row(q_new, kin)
    vx = (p_new - np.einsum("...i,...i->...", row[..., 1:], v[..., 1:])) / row[..., 0]
    v[..., 0] = vx
    q_new[..., 0] = q[..., 0] + dt * vx
    return q_new, v, fc


def clamp_action(targets, residual, character: CharacterModel, cfg: SimConfig):
    lim = character.joint_limits
    targets = np.clip(targets, lim[:, 0], lim[:, 1])
    caps = np.array([cfg.residual_force_cap, cfg.residual_force_cap, cfg.residual_torque_cap])
    return targets, np.clip(residual, -caps, caps)


def diverged_mask(q, qd, cfg: SimConfig) -> np.ndarray:
    bad = ~np.all(np.isfinite(q), axis=-1) | ~np.all(np.isfinite(qd), axis=-1)
    with np.errstate(invalid="ignore"):
        bad |= np.any(np.abs(qd) > cfg.max_speed, axis=-1)
    return bad


def step_arrays(q, qd, targets, residual, character: CharacterModel, cfg: SimConfig):
    """Advance batched states by one control step.

    Returns (q, qd, diverged, contact_forces_of_last_substep).  Diverged rows
    are left with whatever values they reached; callers reset them.
    """
    targets, residual = clamp_action(targets, residual, character, cfg)
    fc = None
    with np.errstate(all="ignore"):
        for _ in range(cfg.substeps):
            q, qd, fc = substep(q, qd, targets, residual, character, cfg)
    return q, qd, diverged_mask(q, qd, cfg), fc


def sim_step(state: SimState, action: Action, config: SimConfig) -> SimState:
    q, qd, bad, _ = step_arrays(
        state.q, state.qd, action.targets, action.residual, state.character, config
    )
    if np.any(bad):
        finite = np.isfinite(qd)
        if not np.all(finite) or not np.all(np.isfinite(q)):
            raise SimulationDiverged("non-finite state", float("nan"))
        i = int(np.argmax(np.abs(qd)))
        raise SimulationDiverged(f"velocity[{i}]", float(qd.reshape(-1)[i]))
    return replace(state, q=q, qd=qd, time=state.time + 1.0 / config.control_hz)


def rest_depth(character: CharacterModel, config: SimConfig) -> float:
    """Penetration (m) if the full weight rested on a single contact spring."""
    return character.total_mass * config.gravity / config.contact_stiffness


def standing_pose(character: CharacterModel | None = None, x: float = 0.0) -> Pose:
    character = character or CharacterModel()
    return Pose(x, character.standing_height, 0.0, np.zeros(N_JOINTS))
