import numpy as np
import pytest
import torch

from tlsurrogate import datagen, geo
from tlsurrogate.model import ModelConfig, Surrogate

torch.set_num_threads(1)

TINY = ModelConfig(d_bathy=3, d_geo=3, d_lat=4, n_inducing=4, bathy_channels=(2, 3, 4), bathy_head=(8, 6),
                   geo_widths=(5, 6))


@pytest.fixture(scope="session")
def small_data():
    spec = datagen.DatasetSpec(n_sources=3, receivers_per_source=6, f_lo=100.0, f_hi=2000.0, seed=11)
    splits, manifest = datagen.generate_dataset(spec)
    return splits, manifest


def make_tiny_model(data, seed=0, config=TINY):
    ranges = geo.NormRanges.from_arrays(data.geometry, data.bathy)
    return Surrogate(config, ranges, seed=seed)


@pytest.fixture
def tiny_model(small_data):
    return make_tiny_model(small_data[0]["train"])


def randomize_bn(model, seed=0):
    """Put model in eval mode with non-trivial running statistics."""
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm1d):
            m.running_mean.copy_(0.1 * torch.randn(m.running_mean.shape, generator=gen, dtype=m.running_mean.dtype))
            m.running_var.copy_(0.5 + torch.rand(m.running_var.shape, generator=gen, dtype=m.running_var.dtype))
    model.eval()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
