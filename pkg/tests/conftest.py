"""Shared fixtures.

The expensive trained artifacts (full and ablated training runs, the oracle
classifier, the toy denoiser) are session-scoped and lazy: light test
selections never pay for them, and the acceptance module shares one set of
runs with the unit tests that need trained models.
"""

from __future__ import annotations

import pytest
import torch

from mmenergy import trainer
from mmenergy.classifier import train_oracle_classifier
from mmenergy.data import DatasetSpec, load_dataset, make_synthetic_dataset
from mmenergy.encoders import ToyTowerConfig, make_toy_towers
from mmenergy.guidance import train_toy_denoiser

DATASET_SEED = 7
HOLDOUT_SEED = 1234


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("shapes")
    make_synthetic_dataset(DatasetSpec(count=320, seed=DATASET_SEED), out)
    return out


@pytest.fixture(scope="session")
def shapes(dataset_dir):
    return load_dataset(dataset_dir)


@pytest.fixture(scope="session")
def holdout(tmp_path_factory):
    out = tmp_path_factory.mktemp("shapes_holdout")
    return make_synthetic_dataset(DatasetSpec(count=64, seed=HOLDOUT_SEED), out)


@pytest.fixture(scope="session")
def toy_pair():
    """Randomly initialized 32x32 towers; tests must not mutate them."""
    return make_toy_towers(ToyTowerConfig(seed=11))


@pytest.fixture(scope="session")
def tiny_pair():
    """8x8 towers for cheap randomized loops."""
    return make_toy_towers(ToyTowerConfig(resolution=8, embed_dim=16, seed=5))


@pytest.fixture(scope="session")
def quick_state(shapes):
    """Short full-objective run, enough for directional properties."""
    config = trainer.TrainConfig(total_steps=150, warmup_steps=30, seed=3)
    state, log = trainer.fit(config, shapes)
    return state, config, log


def _train(dataset, ablation: str, seed: int):
    config = trainer.TrainConfig(ablation=ablation, seed=seed)
    state, log = trainer.fit(config, dataset)
    return state, config, log


@pytest.fixture(scope="session")
def full_run(shapes):
    """The 2000-step full-objective run behind A1/A2/A6/A8."""
    return _train(shapes, trainer.ABLATION_FULL, seed=0)


@pytest.fixture(scope="session")
def adv_only_run(shapes):
    return _train(shapes, trainer.ABLATION_ADV_ONLY, seed=0)


@pytest.fixture(scope="session")
def energy_only_run(shapes):
    return _train(shapes, trainer.ABLATION_ENERGY_ONLY, seed=0)


@pytest.fixture(scope="session")
def oracle_clf():
    return train_oracle_classifier(seed=21)


@pytest.fixture(scope="session")
def denoiser(shapes):
    images = shapes.images(range(len(shapes)))
    return train_toy_denoiser(images, seed=17)


@pytest.fixture(autouse=True)
def _single_thread():
    # keep runs reproducible across test orderings on shared CI boxes
    torch.set_num_threads(1)
    yield
