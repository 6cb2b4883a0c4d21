import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from physguide.datagen import DEFAULT_RANGES, GaitParams, build_dataset, generate_gait, sample_params
from physguide.metrics import compute_phys_metrics, phys_metrics_batch
from physguide.motion import CLASSES


def _params(kind, seed=0, **extra):
    p = sample_params(kind, DEFAULT_RANGES[kind], np.random.default_rng(seed))
    return GaitParams(**{**p.__dict__, **extra})


def test_zero_artifact_stand():
    for seed in range(5):
        assert compute_phys_metrics(generate_gait(_params("stand", seed), 60)).phys_err < 1.0


def test_zero_artifact_walk_skate():
    for seed in range(10):
        m = generate_gait(_params("walk", seed), 60)
        assert m.condition.label == "walk"
        assert compute_phys_metrics(m).skate < 2.0


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(CLASSES), st.integers(0, 1000))
def test_float_offset_arithmetic(kind, seed):
    m = generate_gait(_params(kind, seed, float_mm=20.0), 60)
    assert compute_phys_metrics(m).float == pytest.approx(15.0, abs=0.5)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(CLASSES), st.integers(0, 1000), st.floats(0, 30), st.floats(0, 30))
def test_artifact_knobs_are_monotone(kind, seed, a, b):
    lo, hi = sorted([a, b])
    f = [compute_phys_metrics(generate_gait(_params(kind, seed, float_mm=v), 40)).float for v in (lo, hi)]
    s = [compute_phys_metrics(generate_gait(_params(kind, seed, slide_mm=v), 40)).skate for v in (lo, hi)]
    assert f[1] >= f[0] - 1e-9
    assert s[1] >= s[0] - 1e-9


def test_invalid_params():
    with pytest.raises(ValueError):
        GaitParams("run", 1.0)
    with pytest.raises(ValueError):
        GaitParams("walk", 0.0)
    with pytest.raises(ValueError):
        generate_gait(GaitParams("hop", 2.0, knee_amplitude=3.0), 30)


def test_dataset_counts_and_determinism(tmp_path):
    counts = {"stand": 10, "walk": 10, "hop": 10}
    build_dataset(tmp_path / "a", counts, H=30, seed=4)
    build_dataset(tmp_path / "b", counts, H=30, seed=4)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 31 and "manifest.json" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    import json

    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["class_counts"] == counts
    with pytest.raises(ValueError):
        build_dataset(tmp_path / "c", {"stand": 0}, write=False)


def test_default_dataset_statistics():
    ds = build_dataset(None, seed=0, write=False)
    assert len(ds) == 900
    frames = ds.frames_array()
    deltas = frames.copy()
    deltas[:, 1:, 0] = np.diff(frames[:, :, 0], axis=1)
    std = deltas.reshape(-1, 9).std(0)
    assert np.all(np.isfinite(std)) and np.all(std > 0)
    errs = [p.phys_err for p in phys_metrics_batch(frames, ds.character)]
    assert np.mean(errs) < 3.0
