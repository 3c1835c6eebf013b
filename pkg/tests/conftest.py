"""Shared fixtures: a tiny generated dataset and toy model configs."""
import numpy as np
import pytest

from app.config import DataConfig, ModelConfig, OptimConfig, RunConfig, get_settings
from app.data.dataset import SimRDataset
from app.data.synth import generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def clear_settings_cache():
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture(scope="session")
def tiny_data_config() -> DataConfig:
    return DataConfig(
        k=3, grid_rows=2, grid_cols=2, p=6, max_len=8,
        n_train=48, n_val=16, n_test=16, seed=3, noise_sigma=0.3, max_concepts_per_image=2,
    )


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_data_config):
    path = tmp_path_factory.mktemp("tiny_dataset")
    generate(tiny_data_config, path)
    return path


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir) -> SimRDataset:
    return SimRDataset(tiny_dataset_dir)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    return ModelConfig(dim=8, heads=2, enc_layers=1, enc_heads=2)


@pytest.fixture
def tiny_run_config(tmp_path, tiny_dataset_dir, tiny_model_config) -> RunConfig:
    return RunConfig(
        dataset=tiny_dataset_dir,
        output_dir=tmp_path / "run",
        seed=0,
        model=tiny_model_config,
        optim=OptimConfig(lr=5e-3, epochs=2, batch_size=8),
    )


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the end-to-end benchmarks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size training benchmark, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
