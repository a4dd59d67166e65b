import os

import numpy as np
import pytest

from engine.tensor import checked_mode
from models.config import CorpusConfig, ModelConfig, RunConfig
from synth.corpus import generate_corpus

RUN_SLOW = os.getenv("G2C_RUN_SLOW", "0").lower() in ["true", "1", "t"]


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason="set G2C_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def checked():
    """Every test runs with non-finite detection on"""
    with checked_mode(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        image_size=16,
        generator_base=4,
        residual_blocks=1,
        discriminator_base=4,
        discriminator_layers=2,
        classifier_base=4,
        expansion=2,
        reduction=2,
    )


@pytest.fixture
def tiny_corpus_config(tmp_path):
    return CorpusConfig(
        out_dir=str(tmp_path / "corpus"),
        seed=3,
        image_size=16,
        n_train=40,
        n_test=24,
        reference_n=6,
        train_patients=10,
        test_patients=6,
        separability_check=False,
    )


@pytest.fixture
def tiny_corpus(tiny_corpus_config):
    manifest = generate_corpus(tiny_corpus_config)
    return tiny_corpus_config.out_dir, manifest


@pytest.fixture
def tiny_run_config(tiny_corpus_config, tiny_model_config):
    return RunConfig.model_validate({
        "corpus": tiny_corpus_config.model_dump(),
        "model": tiny_model_config.model_dump(),
        "train": {
            "stage1": {"epochs": 1, "batch_size": 2},
            "stage2": {"epochs": 2, "freeze_generator_epochs": 1, "decay_every": 1, "batch_size": 8},
            "target_stains": [1, 2, 3],
        },
        "grid": {"seeds": [0], "variants": ["ONLY", "ALL"], "modes": ["joint"]},
    })
