import numpy as np
import pytest
import torch

from physguide.denoiser import (
    Denoiser, MotionDenoiser, Normalizer, TrainConfig, TrainingDiverged, denoiser_loss,
    from_deltas, to_deltas, train_denoiser,
)
from physguide.motion import Condition, MotionDataset


def _tiny(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return MotionDenoiser(H=3, hidden=(2,)).to(dtype)


def test_output_shape():
    m = _tiny(dtype=torch.float32)
    x = torch.randn(4, 3, 9)
    assert m(x, torch.full((4,), 0.5), torch.tensor([0, 1, 2, 3])).shape == x.shape
    with pytest.raises(ValueError):
        m(torch.randn(4, 2, 9), torch.ones(4), torch.zeros(4, dtype=torch.long))


def test_zero_weights_give_zero_motion():
    m = _tiny()
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    out = m(torch.randn(2, 3, 9, dtype=torch.float64), torch.tensor([0.1, 3.0]), torch.tensor([0, 3]))
    assert torch.all(out == 0)


def test_loss_gradient_matches_finite_differences():
    m = _tiny(seed=3)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 3, 9, generator=g, dtype=torch.float64)
    eps = torch.randn(1, 3, 9, generator=g, dtype=torch.float64)
    sigma = torch.tensor([0.7], dtype=torch.float64)
    cond = torch.tensor([1])
    loss = denoiser_loss(m, x, sigma, eps, cond)
    grads = torch.autograd.grad(loss, list(m.parameters()))
    analytic = torch.cat([gr.reshape(-1) for gr in grads])
    numeric = []
    h = 1e-6
    with torch.no_grad():
        for p in m.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = denoiser_loss(m, x, sigma, eps, cond).item()
                flat[i] = old - h
                down = denoiser_loss(m, x, sigma, eps, cond).item()
                flat[i] = old
                numeric.append((up - down) / (2 * h))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    rel = (analytic - numeric).norm() / numeric.norm()
    assert rel < 1e-4


def test_delta_representation_roundtrip(small_dataset):
    f = small_dataset.frames_array()
    f = f - f[:, :1, :1] * np.eye(9)[0]  # start every motion at x = 0
    assert np.allclose(from_deltas(to_deltas(f)), f, atol=1e-12)
    norm = Normalizer.fit(f)
    assert np.allclose(norm.decode(norm.encode(f)), f, atol=1e-9)
    assert np.all(np.isfinite(norm.std)) and np.all(norm.std > 0)


def test_zero_epochs_returns_initialization(small_dataset):
    cfg = TrainConfig(epochs=0, hidden=(16,), seed=5)
    a = train_denoiser(small_dataset, cfg)
    torch.manual_seed(5)
    fresh = MotionDenoiser(20, hidden=(16,), sigma_data=a.model.sigma_data)
    for p, q in zip(a.model.parameters(), fresh.parameters()):
        assert torch.equal(p, q)
    assert a.loss_history == []


def test_training_is_reproducible(small_dataset):
    cfg = TrainConfig(epochs=3, hidden=(16,), seed=1)
    a, b = train_denoiser(small_dataset, cfg), train_denoiser(small_dataset, cfg)
    assert a.loss_history == b.loss_history
    assert all(np.isfinite(a.loss_history))
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(p, q)


def test_full_dropout_ignores_condition(small_dataset):
    den = train_denoiser(small_dataset, TrainConfig(epochs=5, hidden=(16,), cond_dropout=1.0))
    x = np.random.default_rng(0).standard_normal((3, 20, 9))
    null = den(x, 0.5, np.full(3, 3))
    for c in range(3):
        assert np.array_equal(den(x, 0.5, np.full(3, c)), null)


def test_nan_loss_aborts_with_diagnostics(small_dataset):
    with pytest.raises(TrainingDiverged) as err:
        train_denoiser(small_dataset, TrainConfig(epochs=50, hidden=(16,), lr=1e6, grad_clip=1e9))
    assert len(err.value.batch_seed) == 3


def test_checkpoint_roundtrip(tmp_path, small_dataset):
    den = train_denoiser(small_dataset, TrainConfig(epochs=2, hidden=(8, 8)))
    den.save(tmp_path / "den")
    back = Denoiser.load(tmp_path / "den")
    x = np.random.default_rng(0).standard_normal((2, 20, 9))
    assert np.array_equal(back(x, 0.3, np.array([0, 3])), den(x, 0.3, np.array([0, 3])))
    assert back.norm.mean.tolist() == den.norm.mean.tolist()
    assert back.loss_history == den.loss_history
    with pytest.raises(ValueError):
        back.shape(21)


def test_codec_roundtrip(small_dataset):
    den = train_denoiser(small_dataset, TrainConfig(epochs=0, hidden=(8,)))
    ms = small_dataset.motions[:3]
    out = den.decode(den.encode(ms), [m.condition for m in ms])
    for a, b in zip(ms, out):
        shifted = a.frames.astype(np.float64)
        shifted[:, 0] -= shifted[0, 0]
        assert np.allclose(b.frames, shifted, atol=1e-5)
        assert b.condition == a.condition


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(cond_dropout=1.5)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        train_denoiser(MotionDataset([]), TrainConfig())
