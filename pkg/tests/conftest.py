import pytest

from phasekd.data import PhaseModel, generate_dataset
from phasekd.losses import EncoderLossConfig
from phasekd.nn import EncoderConfig
from phasekd.trainer import DecoderRunConfig, EncoderRunConfig, PipelineConfig


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(PhaseModel(), 10, length_range=(50, 70), seed=0)


@pytest.fixture(scope="session")
def tiny_pipeline():
    enc = EncoderRunConfig(epochs=1, batch_size=32, model=EncoderConfig(hidden_dim=16, feature_dim=12),
                           loss=EncoderLossConfig(proj_dim=8))
    dec = DecoderRunConfig(epochs=3, gru_hidden=8, tcn_channels=6, tcn_blocks=2)
    return PipelineConfig(enc, dec, n_train=6)
