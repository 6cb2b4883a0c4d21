"""Planar biped morphology and forward kinematics.

Generalized coordinates are ``q = (x, z, theta, hip_l, knee_l, ankle_l,
hip_r, knee_r, ankle_r)``.  The root sits at the hip; the torso extends
upward from it.  Every body angle is the root angle plus the joint angles
along its chain, so a body's world rotation is linear in ``q``.

Local frames: a body rotated by ``phi`` maps a local vector ``(a, b)`` to
``(a cos phi - b sin phi, a sin phi + b cos phi)``.  Leg segments point
along local ``-z``, so a positive hip angle swings the leg forward (+x).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

ROOT_DOF = 3
N_JOINTS = 6
POSE_DIM = ROOT_DOF + N_JOINTS

JOINT_NAMES = ("hip_l", "knee_l", "ankle_l", "hip_r", "knee_r", "ankle_r")
BODY_NAMES = ("torso", "thigh_l", "shin_l", "foot_l", "thigh_r", "shin_r", "foot_r")
# points used for joint-position rewards
JOINT_POINT_NAMES = ("hip", "knee_l", "ankle_l", "knee_r", "ankle_r")
FOOT_POINT_NAMES = ("heel_l", "toe_l", "heel_r", "toe_r")
# all points that may touch the ground in simulation and metrics
CONTACT_POINT_NAMES = FOOT_POINT_NAMES + ("knee_l", "knee_r", "hip", "head")


@dataclass(frozen=True)
class CharacterModel:
    """Segment lengths (m), masses (kg) and joint limits (rad) of the biped.

    ``leg_scale`` is the character attribute: a uniform factor on thigh and
    shin lengths.
    """

    torso_length: float = 0.60
    torso_mass: float = 10.0
    thigh_length: float = 0.45
    thigh_mass: float = 5.0
    shin_length: float = 0.45
    shin_mass: float = 3.0
    foot_length: float = 0.20
    foot_mass: float = 1.0
    foot_height: float = 0.06
    heel_offset: float = 0.05
    leg_scale: float = 1.0
    hip_limits: tuple[float, float] = (-1.2, 1.6)
    knee_limits: tuple[float, float] = (-2.4, 0.1)
    ankle_limits: tuple[float, float] = (-1.0, 1.4)

    def __post_init__(self):
        positive = (
            self.torso_length, self.torso_mass, self.thigh_length, self.thigh_mass,
            self.shin_length, self.shin_mass, self.foot_length, self.foot_mass,
            self.foot_height, self.leg_scale,
        )
        if not all(np.isfinite(v) and v > 0 for v in positive):
            raise ValueError("character lengths and masses must be finite and positive")
        if not 0.8 <= self.leg_scale <= 1.2:
            raise ValueError(f"leg_scale {self.leg_scale} outside [0.8, 1.2]")
        for lo, hi in (self.hip_limits, self.knee_limits, self.ankle_limits):
            if not lo < hi:
                raise ValueError("joint limits must satisfy low < high")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("hip_limits", "knee_limits", "ankle_limits"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CharacterModel":
        d = dict(d)
        for k in ("hip_limits", "knee_limits", "ankle_limits"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @property
    def thigh(self) -> float:
        return self.thigh_length * self.leg_scale

    @property
    def shin(self) -> float:
        return self.shin_length * self.leg_scale

    @property
    def total_mass(self) -> float:
        return self.torso_mass + 2 * (self.thigh_mass + self.shin_mass + self.foot_mass)

    @property
    def joint_limits(self) -> np.ndarray:
        """(6, 2) array of [low, high] per internal joint."""
        one_leg = [self.hip_limits, self.knee_limits, self.ankle_limits]
        return np.array(one_leg * 2, dtype=np.float64)

    @property
    def standing_height(self) -> float:
        """Root height with straight legs and flat feet resting on the ground."""
        return self.thigh + self.shin + self.foot_height

    @cached_property
    def kinematics(self) -> "_Kinematics":
        return _Kinematics(self)


def _mask(*idx: int) -> np.ndarray:
    m = np.zeros(POSE_DIM)
    m[list(idx)] = 1.0
    return m


class _Kinematics:
    """Precomputed term tables for batched planar kinematics.

    Every point of interest is ``root + sum_i R(mask_i . q) v_i``; the tables
    hold the masks, local vectors and the point each term belongs to.
    """

    def __init__(self, ch: CharacterModel):
        th, sh = ch.thigh, ch.shin
        # angular dependency masks per body
        torso = _mask(2)
        legs = {}
        for side, base in (("l", 3), ("r", 6)):
            legs[f"thigh_{side}"] = _mask(2, base)
            legs[f"shin_{side}"] = _mask(2, base, base + 1)
            legs[f"foot_{side}"] = _mask(2, base, base + 1, base + 2)
        self.body_masks = np.stack(
            [torso] + [legs[n] for n in BODY_NAMES[1:]]
        )  # (7, 9)

        fh, fl, ho = ch.foot_height, ch.foot_length, ch.heel_offset
        foot_com = np.array([fl / 2 - ho, -fh / 2])

        def leg_chain(side: str, upto: str, local_end: np.ndarray | None):
            terms = [(legs[f"thigh_{side}"], np.array([0.0, -th]))]
            if upto == "knee":
                return terms
            terms.append((legs[f"shin_{side}"], np.array([0.0, -sh])))
            if upto == "ankle":
                return terms
            terms.append((legs[f"foot_{side}"], local_end))
            return terms

        points: dict[str, list] = {}
        points["hip"] = []
        points["head"] = [(torso, np.array([0.0, ch.torso_length]))]
        for s in ("l", "r"):
            points[f"knee_{s}"] = leg_chain(s, "knee", None)
            points[f"ankle_{s}"] = leg_chain(s, "ankle", None)
            points[f"heel_{s}"] = leg_chain(s, "foot", np.array([-ho, -fh]))
            points[f"toe_{s}"] = leg_chain(s, "foot", np.array([fl - ho, -fh]))
        # body centres of mass
        com: dict[str, list] = {"torso": [(torso, np.array([0.0, ch.torso_length / 2]))]}
        for s in ("l", "r"):
            com[f"thigh_{s}"] = [(legs[f"thigh_{s}"], np.array([0.0, -th / 2]))]
            com[f"shin_{s}"] = leg_chain(s, "knee", None) + [
                (legs[f"shin_{s}"], np.array([0.0, -sh / 2]))
            ]
            com[f"foot_{s}"] = leg_chain(s, "ankle", None) + [(legs[f"foot_{s}"], foot_com)]

        self.point_names = list(points)
        self.com_names = list(BODY_NAMES)
        all_points = [points[n] for n in self.point_names] + [com[n] for n in self.com_names]
        masks, vecs, owner = [], [], []
        for pi, terms in enumerate(all_points):
            for m, v in terms:
                masks.append(m)
                vecs.append(v)
                owner.append(pi)
        self.n_points = len(all_points)
        self.term_masks = np.array(masks)  # (T, 9)
        self.term_vecs = np.array(vecs)  # (T, 2)
        self.scatter = np.zeros((self.n_points, len(owner)))
        self.scatter[owner, np.arange(len(owner))] = 1.0
        self.index = {n: i for i, n in enumerate(self.point_names)}
        self.com_offset = len(self.point_names)

        self.masses = np.array(
            [ch.torso_mass, ch.thigh_mass, ch.shin_mass, ch.foot_mass,
             ch.thigh_mass, ch.shin_mass, ch.foot_mass]
        )
        foot_inertia = ch.foot_mass * (fl**2 + fh**2) / 12.0
        self.inertias = np.array(
            [ch.torso_mass * ch.torso_length**2 / 12.0,
             ch.thigh_mass * th**2 / 12.0, ch.shin_mass * sh**2 / 12.0, foot_inertia,
             ch.thigh_mass * th**2 / 12.0, ch.shin_mass * sh**2 / 12.0, foot_inertia]
        )
        self.contact_idx = np.array([self.index[n] for n in CONTACT_POINT_NAMES])
        self.foot_idx = np.array([self.index[n] for n in FOOT_POINT_NAMES])
        self.joint_idx = np.array([self.index[n] for n in JOINT_POINT_NAMES])
        self.com_idx = np.arange(self.com_offset, self.n_points)
        # body endpoints and contact points, for lowest-point queries
        self.surface_idx = np.array(
            [self.index[n] for n in ("head", "hip", "knee_l", "ankle_l", "knee_r", "ankle_r")
             + FOOT_POINT_NAMES]
        )

    def positions(self, q: np.ndarray) -> np.ndarray:
        """World positions of all tracked points, shape (..., n_points, 2)."""
        w = self._rotated(q)
        return q[..., None, :2] + np.einsum("pt,...tc->...pc", self.scatter, w)

    def _rotated(self, q: np.ndarray) -> np.ndarray:
        phi = q @ self.term_masks.T
        c, s = np.cos(phi), np.sin(phi)
        vx, vz = self.term_vecs[:, 0], self.term_vecs[:, 1]
        return np.stack([c * vx - s * vz, s * vx + c * vz], axis=-1)

    def jacobians(self, q: np.ndarray, qd: np.ndarray):
        """Positions, Jacobians (..., P, 2, 9) and velocity-product accelerations (..., P, 2)."""
        w = self._rotated(q)
        pos = q[..., None, :2] + np.einsum("pt,...tc->...pc", self.scatter, w)
        perp = np.stack([-w[..., 1], w[..., 0]], axis=-1)  # dR/dphi applied to v
        jt = perp[..., :, :, None] * self.term_masks[:, None, :]  # (..., T, 2, 9)
        jac = np.einsum("pt,...tcd->...pcd", self.scatter, jt)
        jac[..., 0, 0] += 1.0
        jac[..., 1, 1] += 1.0
        phid = qd @ self.term_masks.T
        bias = -np.einsum("pt,...tc->...pc", self.scatter, (phid**2)[..., None] * w)
        return pos, jac, bias


def body_angles(q: np.ndarray, character: CharacterModel) -> np.ndarray:
    """World orientation of each body (..., 7), unwrapped."""
    return np.asarray(q) @ character.kinematics.body_masks.T


@dataclass(frozen=True)
class Pose:
    """Root position (x, z), root rotation and six internal joint angles."""

    root_x: float
    root_z: float
    theta: float
    joints: np.ndarray = field(default_factory=lambda: np.zeros(N_JOINTS))

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float64).reshape(-1)
        if j.shape != (N_JOINTS,):
            raise ValueError(f"expected {N_JOINTS} joint angles, got {j.shape}")
        object.__setattr__(self, "joints", j)
        if not np.all(np.isfinite(self.vector())):
            raise ValueError("pose contains non-finite values")

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.root_x, self.root_z, self.theta], self.joints])

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=np.float64)
        return cls(float(v[0]), float(v[1]), float(v[2]), v[3:POSE_DIM].copy())


@dataclass(frozen=True)
class FKResult:
    """World-frame points (m) and body orientations (rad) of one or more poses."""

    points: dict[str, np.ndarray]
    body_com: np.ndarray  # (..., 7, 2)
    body_angles: np.ndarray  # (..., 7)

    def joint_positions(self) -> np.ndarray:
        return np.stack([self.points[n] for n in JOINT_POINT_NAMES], axis=-2)

    def foot_points(self) -> np.ndarray:
        return np.stack([self.points[n] for n in FOOT_POINT_NAMES], axis=-2)


def forward_kinematics(pose, character: CharacterModel) -> FKResult:
    """Positions of joints, contact points and body centres for a pose or pose array."""
    q = pose.vector() if isinstance(pose, Pose) else np.asarray(pose, dtype=np.float64)
    kin = character.kinematics
    pos = kin.positions(q)
    points = {n: pos[..., i, :] for i, n in enumerate(kin.point_names)}
    return FKResult(points, pos[..., kin.com_idx, :], body_angles(q, character))


def lowest_point_height(frames: np.ndarray, character: CharacterModel) -> np.ndarray:
    """Per-frame height of the lowest body endpoint or contact point."""
    kin = character.kinematics
    pos = kin.positions(np.asarray(frames, dtype=np.float64))
    return pos[..., kin.surface_idx, 1].min(axis=-1)
