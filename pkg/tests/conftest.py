import pytest

from entpick import mdn, pipeline, sim


@pytest.fixture(scope="session")
def sim_config():
    return sim.SimConfig()


@pytest.fixture(scope="session")
def collected_dataset(sim_config):
    """The standard 200-grasp collection used by training-dependent tests."""
    return pipeline.run_collection(sim_config, 200, seed=101)


@pytest.fixture(scope="session")
def trained_model(collected_dataset):
    return mdn.train(collected_dataset, mdn.ModelConfig(seed=7))
