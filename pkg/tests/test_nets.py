import numpy as np
import pytest
import torch
import torch.nn as nn

from krlab.nets import (
    ClassifierConfig,
    DiscriminatorConfig,
    GeneratorConfig,
    build_classifier,
    build_discriminator,
    build_generator,
    count_params,
    ema_update,
    load_checkpoint,
    save_checkpoint,
)


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(num_classes=0)
    with pytest.raises(ValueError):
        DiscriminatorConfig(num_classes=3, conv_dim=0)
    with pytest.raises(ValueError):
        ClassifierConfig(num_classes=3, initial_filters=0)


def test_generator_output(tiny_generator):
    z = torch.randn(4, 128)
    y = torch.tensor([0, 1, 2, 0])
    with torch.no_grad():
        out = tiny_generator(z, y)
    assert out.shape == (4, 3, 32, 32)
    assert out.min() >= 0.0 and out.max() <= 1.0  # sigmoid range
    with pytest.raises(ValueError):
        tiny_generator(z, torch.tensor([0, 1, 2, 3]))


def test_generator_conditioning_matters(tiny_generator):
    z = torch.randn(2, 128)
    with torch.no_grad():
        a = tiny_generator(z, torch.tensor([0, 0]))
        b = tiny_generator(z, torch.tensor([1, 1]))
    assert not torch.allclose(a, b)


def test_discriminator_output():
    torch.manual_seed(0)
    disc = build_discriminator(DiscriminatorConfig.tiny(3, 3))
    x = torch.rand(4, 3, 32, 32)
    y = torch.tensor([0, 1, 2, 0])
    out = disc(x, y)
    assert out.shape == (4,)
    assert torch.isfinite(out).all()
    with pytest.raises(ValueError):
        disc(x, torch.tensor([0, 0, 0, 5]))


def test_discriminator_grayscale():
    disc = build_discriminator(DiscriminatorConfig.tiny(2, 1))
    out = disc(torch.rand(2, 1, 32, 32), torch.tensor([0, 1]))
    assert out.shape == (2,)


def test_resnet14_shape_and_layer_count():
    model = build_classifier(ClassifierConfig.tiny(5, 3))
    out = model(torch.rand(2, 3, 32, 32))
    assert out.shape == (2, 5)
    # 14 weighted layers: stem conv + 6 blocks x 2 convs + final linear
    convs = [m for m in model.modules() if isinstance(m, nn.Conv2d)
             and m.kernel_size == (3, 3)]
    linears = [m for m in model.modules() if isinstance(m, nn.Linear)]
    assert len(convs) + len(linears) == 14


def test_tiny_smaller_than_full():
    tiny = build_generator(GeneratorConfig.tiny(3, 3))
    full = build_generator(GeneratorConfig(num_classes=3))
    assert count_params(tiny) < count_params(full)


def test_ema_update_before_and_after_start():
    live = {"w": torch.ones(3), "step": torch.tensor(7)}
    ema = {"w": torch.zeros(3), "step": torch.tensor(0)}
    out = ema_update(ema, live, decay=0.9, step=5, start_step=10)
    assert torch.equal(out["w"], live["w"])  # copy before start
    out = ema_update(ema, live, decay=0.9, step=10, start_step=10)
    assert torch.allclose(out["w"], torch.full((3,), 0.1))
    assert out["step"].item() == 7  # non-float buffers copied from live
    with pytest.raises(ValueError):
        ema_update({"w": torch.zeros(2)}, {"w": torch.ones(3)})


def test_checkpoint_roundtrip(tmp_path, tiny_generator):
    path = str(tmp_path / "gan_epoch_0005.ckpt")
    cfg = GeneratorConfig.tiny(3, 3)
    save_checkpoint(path, "generator", cfg, tiny_generator, step=42,
                    extra={"epoch": 5})
    loaded, payload = load_checkpoint(path, "generator")
    assert payload["step"] == 42 and payload["extra"]["epoch"] == 5
    z = torch.randn(2, 128)
    y = torch.tensor([0, 1])
    with torch.no_grad():
        assert torch.equal(tiny_generator(z, y), loaded(z, y))
    with pytest.raises(ValueError):
        load_checkpoint(path, "classifier")


def test_classifier_checkpoint_roundtrip(tmp_path, tiny_classifier):
    path = str(tmp_path / "clf_teacher.ckpt")
    cfg = ClassifierConfig.tiny(3, 3)
    save_checkpoint(path, "classifier", cfg, tiny_classifier)
    loaded, _ = load_checkpoint(path, "classifier")
    x = torch.rand(2, 3, 32, 32)
    tiny_classifier.eval()
    with torch.no_grad():
        assert torch.equal(tiny_classifier(x), loaded(x))
