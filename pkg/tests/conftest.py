"""
Pytest configuration and shared fixtures.
"""

import pytest
from pathlib import Path

import numpy as np

from kspace_loupe.config import RunConfig
from kspace_loupe.dataset import MANIFEST_NAME, build_dataset
from kspace_loupe.mri_model import simulate_sample
from kspace_loupe.numerics import make_rng, spawn_rng
from kspace_loupe.types import KSpaceSample


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run end-to-end tests that train models")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234)


@pytest.fixture
def small_sample() -> KSpaceSample:
    """16x16, two coils, noise free."""
    return simulate_sample(spawn_rng(7, 0), 16, 16, 2)


@pytest.fixture
def desk_sample() -> KSpaceSample:
    """64x64, four coils (the desk-scale image size)."""
    return simulate_sample(spawn_rng(7, 1), 64, 64, 4)


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    """Smallest configuration that still exercises every stage."""
    return RunConfig.from_dict({
        "data": {"height": 16, "width": 16, "n_coils": 2, "n_train": 2, "n_val": 1, "n_test": 2,
                 "output_dir": str(tmp_path / "data")},
        "pattern": {"gamma": 0.25, "calib_size": 2},
        "model": {"n_blocks": 1, "n_cg": 3, "n_cg_eval": 5, "channels": 4},
        "train": {"epochs": 1, "manifest": str(tmp_path / "data" / MANIFEST_NAME),
                  "checkpoint_dir": str(tmp_path / "checkpoints")},
        "tv": {"n_iter": 20},
        "eval": {"output_dir": str(tmp_path / "reports")},
        "seeds": {"data": 11, "init": 12, "sampling": 13},
    })


@pytest.fixture
def tiny_dataset(tiny_config) -> Path:
    """Manifest path of a dataset generated from ``tiny_config``."""
    build_dataset(tiny_config.data, tiny_config.seeds.data)
    return Path(tiny_config.train.manifest)
