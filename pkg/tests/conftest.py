'''
Shared fixtures: small scene specs, generated corpora and tiny model configs.
'''

import pytest
import torch
from loguru import logger

from attn_generator import GeneratorConfig
from mini_vlm import VlmConfig
from models import SceneSpec
from scene_data import generate_corpus
from storage import save_dataset
from vocabulary import Vocabulary


@pytest.fixture(autouse=True)
def quiet_logs():
    '''Keep loguru output at warning level during tests.'''
    logger.remove()
    logger.add(lambda message: None, level="WARNING")
    yield
    logger.remove()


@pytest.fixture
def spec():
    return SceneSpec(seed=3)


@pytest.fixture(scope="session")
def corpus():
    '''Twelve default-size clips, generated once per session.'''
    return generate_corpus(SceneSpec(seed=11), 12)


@pytest.fixture
def dataset_dir(tmp_path, corpus):
    directory = tmp_path / "data"
    save_dataset(corpus, str(directory), SceneSpec(seed=11))
    return directory


@pytest.fixture
def vocab():
    return Vocabulary()


@pytest.fixture
def tiny_vlm_config(vocab):
    '''Tiny explainer: d=8, q=2, one block per stage, 16x16 frames.'''
    return VlmConfig(height=16, width=16, patch_size=4, dim=8, num_heads=2, encoder_layers=1,
                     qformer_layers=1, decoder_layers=1, num_queries=2, num_frames=3, vocab_size=len(vocab))


@pytest.fixture
def small_vlm_config(vocab):
    '''Default-size frames, reduced width.'''
    return VlmConfig(dim=16, num_heads=2, encoder_layers=1, qformer_layers=1, decoder_layers=1,
                     num_queries=4, vocab_size=len(vocab))


@pytest.fixture
def tiny_generator_config():
    return GeneratorConfig(height=16, width=16, crop_size=2, dim=8, num_heads=2, num_layers=1)


@pytest.fixture
def seeded():
    torch.manual_seed(0)
