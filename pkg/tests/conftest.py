import pytest
import torch

from gandetect import synth_data

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_records():
    """600 synthetic CIFAR-format records, all 10 classes present."""
    return synth_data.make_synthetic_records(600, seed=123)


@pytest.fixture(scope="session")
def tiny_gan():
    """Width-divided generator/discriminator pair for fast tests."""
    from gandetect import gan_core

    g = gan_core.make_generator(seed=11, width_divisor=8)
    d = gan_core.make_discriminator(seed=12, width_divisor=8)
    return g, d
