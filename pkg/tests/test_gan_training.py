import math
import os

import numpy as np
import pytest
import torch

import krlab.gan_training as gt
from krlab.gan_training import (
    GanDivergence,
    GanTrainConfig,
    hinge_losses,
    logistic_d_loss,
    logistic_g_loss,
    train_gan,
)
from krlab.nets import DiscriminatorConfig, GeneratorConfig, load_checkpoint


def _t(*vals):
    return torch.tensor(vals, dtype=torch.float64)


def test_logistic_d_loss_probes():
    assert math.isclose(logistic_d_loss(_t(0.0), _t(0.0), 0.0).item(),
                        2 * math.log(2), rel_tol=1e-9)
    # saturated: perfectly separated logits drive the loss to zero
    assert logistic_d_loss(_t(40.0), _t(-40.0), 0.0).item() < 1e-9
    # smoothing is a no-op at zero logits by softplus symmetry
    assert math.isclose(logistic_d_loss(_t(0.0), _t(0.0), 0.1).item(),
                        logistic_d_loss(_t(0.0), _t(0.0), 0.0).item(), rel_tol=1e-12)
    # one-sided: smoothing only touches the real term
    base = logistic_d_loss(_t(3.0), _t(-1.0), 0.0).item()
    eps = 0.1
    expected = (0.9 * math.log1p(math.exp(-3.0)) + 0.1 * math.log1p(math.exp(3.0))
                + math.log1p(math.exp(-1.0)))
    assert math.isclose(logistic_d_loss(_t(3.0), _t(-1.0), eps).item(),
                        expected, rel_tol=1e-9)
    assert logistic_d_loss(_t(3.0), _t(-1.0), eps).item() > base


def test_logistic_g_loss_probes():
    assert math.isclose(logistic_g_loss(_t(0.0)).item(), math.log(2), rel_tol=1e-9)
    assert logistic_g_loss(_t(40.0)).item() < 1e-9


def test_hinge_probes():
    d, g = hinge_losses(_t(1.0), _t(-1.0))
    assert d.item() == 0.0
    d, g = hinge_losses(_t(0.0), _t(0.0))
    assert d.item() == 2.0 and g.item() == 0.0
    d, g = hinge_losses(_t(2.0), _t(-2.0))
    assert d.item() == 0.0 and g.item() == 2.0


def _fd_grad(fn, x0, h=1e-5):
    return (fn(x0 + h) - fn(x0 - h)) / (2 * h)


@pytest.mark.parametrize("point", [-1.5, 0.0, 0.7, 2.0])
def test_loss_gradients_match_finite_differences(point):
    cases = [
        lambda v: logistic_g_loss(_t(v)).item(),
        lambda v: logistic_d_loss(_t(v), _t(0.3), 0.1).item(),
        lambda v: logistic_d_loss(_t(0.3), _t(v), 0.1).item(),
        lambda v: hinge_losses(_t(v), _t(0.3))[0].item(),
        lambda v: hinge_losses(_t(0.3), _t(v))[1].item(),
    ]
    grads = [
        lambda v: -torch.sigmoid(_t(-v)).item(),
        lambda v: -0.9 * torch.sigmoid(_t(-v)).item() + 0.1 * torch.sigmoid(_t(v)).item(),
        lambda v: torch.sigmoid(_t(v)).item(),
        lambda v: -1.0 if v < 1 else 0.0,
        lambda v: -1.0,
    ]
    for fn, analytic in zip(cases, grads):
        fd = _fd_grad(fn, point)
        an = analytic(point)
        if abs(an) > 1e-12:
            assert abs(fd - an) / abs(an) < 1e-3
        else:
            assert abs(fd) < 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        GanTrainConfig(d_updates_per_g=0)
    with pytest.raises(ValueError):
        GanTrainConfig(checkpoint_every=0)
    with pytest.raises(ValueError):
        GanTrainConfig(adversarial_loss="wasserstein")


@pytest.fixture(scope="module")
def small_train(toy_data):
    return toy_data[0].subset(np.arange(128))


def _smoke_cfg(epochs, every=1):
    return GanTrainConfig(epochs=epochs, checkpoint_every=every, batch_size=64)


def test_train_gan_checkpoint_schedule(small_train, tmp_path):
    records = train_gan(small_train, GeneratorConfig.tiny(3, 3),
                        DiscriminatorConfig.tiny(3, 3), _smoke_cfg(2),
                        seed=0, out_dir=str(tmp_path))
    assert [r.epoch for r in records] == [1, 2]
    for r in records:
        assert os.path.basename(r.path) == f"gan_epoch_{r.epoch:04d}.ckpt"
        gen, payload = load_checkpoint(r.path, "generator")
        assert payload["extra"]["ema"] is True
        with torch.no_grad():
            out = gen(torch.randn(2, 128), torch.tensor([0, 1]))
        assert out.shape == (2, 3, 32, 32)


def test_train_gan_checkpoint_count_every_five(small_train, tmp_path):
    records = train_gan(small_train, GeneratorConfig.tiny(3, 3),
                        DiscriminatorConfig.tiny(3, 3), _smoke_cfg(10, every=5),
                        seed=0, out_dir=str(tmp_path))
    assert [r.epoch for r in records] == [5, 10]


def test_train_gan_deterministic(small_train, tmp_path):
    outs = []
    for sub in ("a", "b"):
        records = train_gan(small_train, GeneratorConfig.tiny(3, 3),
                            DiscriminatorConfig.tiny(3, 3), _smoke_cfg(1),
                            seed=11, out_dir=str(tmp_path / sub))
        gen, _ = load_checkpoint(records[-1].path, "generator")
        outs.append({k: v.clone() for k, v in gen.state_dict().items()})
    for k in outs[0]:
        assert torch.equal(outs[0][k], outs[1][k]), k


def test_train_gan_seed_changes_result(small_train, tmp_path):
    states = []
    for seed, sub in ((1, "a"), (2, "b")):
        records = train_gan(small_train, GeneratorConfig.tiny(3, 3),
                            DiscriminatorConfig.tiny(3, 3), _smoke_cfg(1),
                            seed=seed, out_dir=str(tmp_path / sub))
        gen, _ = load_checkpoint(records[-1].path, "generator")
        states.append(gen.state_dict())
    assert any(not torch.equal(states[0][k], states[1][k]) for k in states[0])


def test_train_gan_rejects_small_dataset(toy_data, tmp_path):
    tiny = toy_data[0].subset(np.arange(16))
    with pytest.raises(ValueError):
        train_gan(tiny, GeneratorConfig.tiny(3, 3), DiscriminatorConfig.tiny(3, 3),
                  _smoke_cfg(1), seed=0, out_dir=str(tmp_path))


def test_divergence_snapshot(small_train, tmp_path, monkeypatch):
    def bad_loss(real, fake, smoothing=0.0):
        return torch.tensor(float("nan"), requires_grad=True)

    monkeypatch.setattr(gt, "logistic_d_loss", bad_loss)
    with pytest.raises(GanDivergence):
        train_gan(small_train, GeneratorConfig.tiny(3, 3),
                  DiscriminatorConfig.tiny(3, 3), _smoke_cfg(1),
                  seed=0, out_dir=str(tmp_path))
    assert (tmp_path / "divergence_snapshot.ckpt").exists()
