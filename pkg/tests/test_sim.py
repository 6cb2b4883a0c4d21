import json
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physguide.character import POSE_DIM, Pose
from physguide.motion import Motion, angles_valid
from physguide.sim import (
    Action, SimConfig, SimState, SimulationDiverged, contact_forces, extract_pose,
    init_state_from_motion, pd_torques, rest_depth, sim_step, standing_pose, step_arrays, substep,
)

from .conftest import resting_stand


def _free_state(z=1.0):
    return np.array([0.0, z, 0, 0, 0, 0, 0, 0, 0]), np.zeros(POSE_DIM)


def test_free_fall_single_substep(character):
    cfg = SimConfig(contacts=False)
    q, qd = _free_state()
    q1, qd1, _ = substep(q, qd, q[3:], np.zeros(3), character, cfg)
    assert abs(qd1[1] - (-9.81 / 60)) < 1e-9
    assert abs(q1[1] - (1 - 0.1635 / 60)) < 1e-9
    assert np.allclose(qd1[3:], 0, atol=1e-12) and np.allclose(q1[3:], 0, atol=1e-12)


def test_free_fall_control_step(character):
    cfg = SimConfig(contacts=False)
    q, qd = _free_state()
    st_ = sim_step(SimState(q, qd, 0.0, character), Action(np.zeros(6), np.zeros(3)), cfg)
    g = 9.81 / 60
    assert abs(st_.qd[1] + 2 * g) < 1e-9
    assert abs(st_.q[1] - (1 - g / 60 - 2 * g / 60)) < 1e-9
    assert st_.time == pytest.approx(1 / 30)


def test_pd_torque_examples():
    assert pd_torques(0.1, 0.2, 0.2, 100.0, 5.0, 200.0) == pytest.approx(9.0)
    assert pd_torques(0.3, 0.0, 0.3, 300.0, 15.0, 200.0) == 0.0


@given(st.floats(-10, 10), st.floats(-50, 50), st.floats(-10, 10))
def test_pd_torque_clamped(q, qd, target):
    assert abs(pd_torques(q, qd, target, 300.0, 15.0, 200.0)) <= 200.0


def _contact_state(character, z_point, v=(0.0, 0.0)):
    """Standing state shifted so the lowest foot point sits at z_point."""
    q = standing_pose(character).vector()
    q[1] += z_point
    qd = np.zeros(POSE_DIM)
    qd[:2] = v
    return SimState(q, qd, 0.0, character)


def test_contact_examples(character, sim_config):
    assert np.all(contact_forces(_contact_state(character, 0.01), sim_config) == 0)
    f = contact_forces(_contact_state(character, -0.001), sim_config)
    # heel and toe of both feet are level with the ground plane
    assert np.allclose(f[:4, 1], 200.0)
    assert np.all(f[4:] == 0)


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=9, max_size=9),
       st.lists(st.floats(-5, 5), min_size=9, max_size=9), st.floats(-0.05, 0.3))
def test_friction_inside_cone(character, sim_config, dq, qd, dz):
    q = standing_pose(character).vector() + 0.3 * np.array(dq)
    q[1] = character.standing_height + dz
    f = contact_forces(SimState(q, np.array(qd), 0.0, character), sim_config)
    assert np.all(f[:, 1] >= 0)
    assert np.all(np.abs(f[:, 0]) <= sim_config.friction_coef * f[:, 1] + 1e-9)


def test_standing_rest_penetration(character, sim_config):
    kin = character.kinematics
    q, qd = standing_pose(character).vector(), np.zeros(POSE_DIM)
    worst = 0.0
    for _ in range(60):
        q, qd, bad, _ = step_arrays(q, qd, np.zeros(6), np.zeros(3), character, sim_config)
        assert not bad
        worst = max(worst, -kin.positions(q)[kin.contact_idx, 1].min())
    assert worst <= rest_depth(character, sim_config) + 5e-4


def test_standing_drift_two_seconds(character, sim_config):
    q0 = standing_pose(character).vector()
    q, qd = q0.copy(), np.zeros(POSE_DIM)
    for _ in range(60):
        q, qd, _, _ = step_arrays(q, qd, q0[3:], np.zeros(3), character, sim_config)
    assert abs(q[1] - q0[1]) < 5e-3


def test_no_ghost_forces(character):
    cfg = SimConfig(gravity=0.0, contacts=False)
    q = np.array([0.3, 1.5, 0.1, 0.2, -0.4, 0.1, -0.1, -0.2, 0.05])
    st_ = sim_step(SimState(q, np.zeros(9), 0.0, character), Action(q[3:], np.zeros(3)), cfg)
    assert np.array_equal(st_.q, q) and np.all(st_.qd == 0)
    assert np.array_equal(extract_pose(st_).vector(), q)


def test_horizontal_momentum_conserved(character):
    from physguide.sim import _x_momentum_row

    kin = character.kinematics
    cfg = SimConfig(contacts=False)
    rng = np.random.default_rng(0)
    for _ in range(10):
        q = np.concatenate([[0.0, 2.0], rng.uniform(-0.5, 0.5, 7)])
        qd = rng.normal(0, 1, 9)
        p0 = _x_momentum_row(q, kin) @ qd
        q1, qd1, _, _ = step_arrays(q, qd, rng.uniform(-0.5, 0.5, 6), np.zeros(3), character, cfg)
        assert abs(_x_momentum_row(q1, kin) @ qd1 - p0) < 1e-9


def test_init_and_extract_roundtrip(small_dataset):
    m = small_dataset.motions[8]
    for h in (0, 5, m.H - 1):
        st_ = init_state_from_motion(m, h)
        assert np.array_equal(extract_pose(st_).vector(), m.frames[h].astype(np.float64))
    single = Motion(m.frames[:1], condition=m.condition)
    assert np.all(init_state_from_motion(single, 0).qd == 0)
    with pytest.raises(IndexError):
        init_state_from_motion(m, m.H)


def test_extract_pose_wraps(character):
    q = np.array([0, 1, 7.0, 4.0, -4.0, 0, 0, 0, 0])
    assert angles_valid(extract_pose(SimState(q, np.zeros(9), 0, character)).vector()[None])


def test_rest_init_has_no_excess_penetration(character, sim_config):
    st_ = init_state_from_motion(resting_stand(character), 0)
    kin = character.kinematics
    depth = -kin.positions(st_.q)[kin.contact_idx, 1].min()
    assert depth <= rest_depth(character, sim_config)


def test_divergence_raises(character):
    cfg = SimConfig(contacts=False)
    q, qd = _free_state()
    qd[0] = 500.0
    with pytest.raises(SimulationDiverged) as err:
        sim_step(SimState(q, qd, 0.0, character), Action(np.zeros(6), np.zeros(3)), cfg)
    assert "velocity" in err.value.quantity


def test_action_validation():
    with pytest.raises(ValueError):
        Action(np.zeros(5), np.zeros(3))


def test_residuals_are_capped(character):
    cfg = SimConfig(contacts=False, gravity=0.0)
    q, qd = _free_state()
    big = sim_step(SimState(q, qd, 0, character), Action(np.zeros(6), np.array([1e4, 0, 0])), cfg)
    cap = sim_step(SimState(q, qd, 0, character), Action(np.zeros(6), np.array([200.0, 0, 0])), cfg)
    assert np.array_equal(big.q, cap.q)


_ROLLOUT = """
import json, sys
import numpy as np
from physguide.character import CharacterModel
from physguide.sim import SimConfig, standing_pose, step_arrays
ch, cfg = CharacterModel(), SimConfig()
q = standing_pose(ch).vector(); q[3] = 0.3; q[1] += 0.05
qd = np.zeros(9)
rng = np.random.default_rng(5)
for _ in range(40):
    q, qd, _, _ = step_arrays(q, qd, rng.uniform(-0.5, 0.5, 6), rng.uniform(-50, 50, 3), ch, cfg)
print(json.dumps([float(v).hex() for v in np.concatenate([q, qd])]))
"""


def test_bit_exact_across_processes():
    outs = [subprocess.run([sys.executable, "-c", _ROLLOUT], capture_output=True, text=True,
                           check=True).stdout for _ in range(2)]
    assert outs[0] == outs[1] and len(json.loads(outs[0])) == 18
