"""
Shared fixtures: a tiny generated corpus, an untrained float64 codec and a scratch lab
"""
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from app import create_lab  # noqa: E402
from config import ExperimentConfig  # noqa: E402
from models.codec import CodecConfig, init_codec  # noqa: E402
from utils.imaging import generate_corpus  # noqa: E402


@pytest.fixture
def corpus():
    return generate_corpus(4, 32, 32, seed=5)


@pytest.fixture
def image(corpus):
    return corpus[0]


@pytest.fixture
def codec64():
    """Untrained codec cast to float64 for exact gradient checks"""
    params = init_codec(3, CodecConfig(channels=3, latent_channels=4, hidden=8))
    params.model.double()
    return params


@pytest.fixture
def small_config(tmp_path):
    cfg = ExperimentConfig.from_dict({
        'out_dir': str(tmp_path / 'run'),
        'corpus': {'n_train': 4, 'n_eval': 3, 'n_aux': 2, 'height': 64, 'width': 64},
        'injection': {'steps': 3},
        'sweep': {'images': 2, 'alpha_grid': [0.2, 0.6], 'lambda_grid': [1.0, 0.5]},
        'game': {'trials': 4, 'calibration_trials': 2},
    })
    return cfg


@pytest.fixture
def lab(small_config):
    lab = create_lab(small_config, debug=True)
    yield lab
    lab.manifest.engine.dispose()


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    np.random.seed(0)
