import numpy as np
import pytest
from hypothesis import settings

from micap.captioner import CaptionerConfig
from micap.encoder import EncoderConfig

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def tiny_encoder():
    return EncoderConfig(stem_channels=4, stage_channels=(4, 4, 8, 8), input_size=32, stem_kernel=3)


@pytest.fixture
def tiny_captioner():
    return CaptionerConfig(hidden=16, layers_per_direction=1, vocab_size=12, max_caption_len=16, dropout=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
