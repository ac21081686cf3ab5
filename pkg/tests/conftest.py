import numpy as np
import pytest

from gimp.config import TrainConfig
from gimp.data import SynthConfig, generate_synthetic
from gimp.model import layout_for


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    """A shrunken desk configuration that trains in about a second."""
    return TrainConfig(n_genes=64, embed_dim=16, d=8, heads=2, gene_heads=2, landmarks=4,
                       n_fragments=8, n_groups=2, window_len=16, gene_epochs=3,
                       pretrain_epochs=2, finetune_epochs=2, batch_size=4, accumulate=4)


@pytest.fixture(scope="session")
def small_synth():
    return SynthConfig(num_patients=24, n_genes=64, n_min=8, n_max=24, embed_dim=16)


@pytest.fixture(scope="session")
def small_dataset(small_cfg, small_synth):
    return generate_synthetic(small_synth).prepared(layout_for(small_cfg).n_genes)
