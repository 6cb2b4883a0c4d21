import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physguide.character import CharacterModel, Pose, forward_kinematics, lowest_point_height
from physguide.motion import (
    Condition, Motion, angles_valid, finite_diff_velocities, load_dataset, motion_from_dict,
    motion_to_dict, read_motion, rot_diff, write_motion,
)

angles = st.floats(-50.0, 50.0, allow_nan=False)


def test_ankle_height_with_straight_legs(character):
    fk = forward_kinematics(Pose(0.0, 1.1, 0.0), character)
    assert fk.points["ankle_l"][1] == pytest.approx(0.20, abs=1e-12)
    assert fk.points["ankle_r"][1] == pytest.approx(0.20, abs=1e-12)
    assert fk.joint_positions().shape == (5, 2)
    assert fk.body_angles.shape == (7,)


def test_standing_height_puts_feet_on_ground(character):
    q = Pose(0.0, character.standing_height, 0.0).vector()
    assert lowest_point_height(q, character) == pytest.approx(0.0, abs=1e-12)


def test_rot_diff_examples():
    assert rot_diff(3.0, -3.0) == pytest.approx(6.0 - 2 * np.pi, abs=1e-12)
    assert rot_diff(np.pi, 0.0) == np.pi
    assert rot_diff(0.0, np.pi) == np.pi
    assert rot_diff(1.234, 1.234) == 0.0


@given(angles, angles)
def test_rot_diff_range_and_consistency(a, b):
    d = rot_diff(a, b)
    assert -np.pi < d <= np.pi
    assert np.isclose(np.cos(d), np.cos(a - b), atol=1e-9)
    assert np.isclose(np.sin(d), np.sin(a - b), atol=1e-9)


@given(angles)
def test_rot_diff_identity(x):
    assert rot_diff(x, x) == 0.0


def test_finite_diff_examples():
    frames = np.zeros((10, 9))
    assert np.all(finite_diff_velocities(Motion(frames)) == 0)
    frames[:, 0] = 0.01 * np.arange(10)
    v = finite_diff_velocities(Motion(frames, fps=30.0))
    assert np.allclose(v[:, 0], 0.3, atol=1e-6)

    frames = np.zeros((2, 9))
    frames[:, 3] = [3.1, -3.1]
    v = finite_diff_velocities(Motion(frames, fps=30.0))
    expected = (2 * np.pi - 6.2) * 30
    assert v[0, 3] == pytest.approx(expected, rel=1e-5)
    assert v[1, 3] == v[0, 3]  # last frame repeats


def test_finite_diff_needs_two_frames():
    with pytest.raises(ValueError):
        finite_diff_velocities(Motion(np.zeros((1, 9))))


@given(st.lists(st.floats(-20, 20, allow_nan=False), min_size=7, max_size=7))
def test_motion_angles_always_wrapped(vals):
    frames = np.zeros((1, 9))
    frames[0, 2:] = vals
    assert angles_valid(Motion(frames).frames)


def test_motion_rejects_bad_input():
    with pytest.raises(ValueError):
        Motion(np.zeros((4, 8)))
    with pytest.raises(ValueError):
        Motion(np.full((4, 9), np.nan))
    with pytest.raises(ValueError):
        Condition("dance")


def test_condition_index_roundtrip():
    for i in range(4):
        assert Condition.from_index(i).index == i
    assert Condition().is_null


def test_motion_file_roundtrip(tmp_path, small_dataset):
    m = small_dataset.motions[7]
    write_motion(m, tmp_path / "m.json")
    back = read_motion(tmp_path / "m.json")
    assert back.condition == m.condition and back.fps == m.fps
    assert np.array_equal(back.frames, m.frames)
    assert json.loads(json.dumps(motion_to_dict(m)))["format_version"] == 1
    with pytest.raises(ValueError):
        motion_from_dict({**motion_to_dict(m), "format_version": 99})


def test_character_dict_roundtrip():
    ch = CharacterModel(leg_scale=1.1)
    assert CharacterModel.from_dict(ch.to_dict()) == ch
    assert ch.thigh == pytest.approx(0.495)


def test_dataset_labels_roundtrip(tmp_path):
    from physguide.datagen import build_dataset

    ds = build_dataset(tmp_path, {"stand": 2, "walk": 2, "hop": 2}, H=10, seed=0)
    back = load_dataset(tmp_path)
    assert back.labels == ds.labels
    assert np.array_equal(back.frames_array(), ds.frames_array())
