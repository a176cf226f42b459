import numpy as np
import pytest
import torch

from krlab.datasets import load_dataset
from krlab.nets import (
    ClassifierConfig,
    GeneratorConfig,
    build_classifier,
    build_generator,
)

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    return str(tmp_path_factory.mktemp("datasets"))


@pytest.fixture(scope="session")
def toy_data(data_root):
    """(train, val, test) of the default procedural dataset."""
    return load_dataset("toy-shapes", data_root)


@pytest.fixture(scope="session")
def tiny_generator():
    torch.manual_seed(0)
    gen = build_generator(GeneratorConfig.tiny(3, 3))
    gen.eval()
    return gen


@pytest.fixture(scope="session")
def tiny_classifier():
    torch.manual_seed(1)
    return build_classifier(ClassifierConfig.tiny(3, 3))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
