"""Shared fixtures: one CRM model fitted on the 3-group quadrant scenario per session."""

import json

import numpy as np
import pytest

from crm_toolkit.attribute_space import full_grid
from crm_toolkit.crm_adapt import TrainConfig, build_predictor, extrapolate_bias, fit_crm, fit_erm_group
from crm_toolkit.synthetic_aed import drop_group, make_2d_quadrant_spec, quadrant_group, sample_dataset

QUADRANT_TRAIN = TrainConfig(learning_rate=1e-2, batch_size=512, steps=3000, seed=0)


@pytest.fixture(scope="session")
def quadrant_aed():
    return make_2d_quadrant_spec()


@pytest.fixture(scope="session")
def quadrant_grid(quadrant_aed):
    return full_grid(quadrant_aed.spec)


@pytest.fixture(scope="session")
def quadrant_scenario(quadrant_grid):
    """Train on three quadrants, test on all four; (-1, -1) is never seen."""
    return drop_group(quadrant_grid, quadrant_group(-1, -1))


@pytest.fixture(scope="session")
def quadrant_train(quadrant_aed, quadrant_scenario):
    return sample_dataset(quadrant_aed, "train", quadrant_scenario, 20000, seed=0)


@pytest.fixture(scope="session")
def quadrant_test(quadrant_aed, quadrant_scenario):
    return sample_dataset(quadrant_aed, "test", quadrant_scenario, 10000, seed=0)


@pytest.fixture(scope="session")
def quadrant_model(quadrant_train, quadrant_scenario):
    return fit_crm(quadrant_train, quadrant_scenario, QUADRANT_TRAIN)


@pytest.fixture(scope="session")
def quadrant_b_star(quadrant_model, quadrant_train, quadrant_grid):
    return extrapolate_bias(quadrant_model, quadrant_train, quadrant_grid)


@pytest.fixture(scope="session")
def quadrant_predictor(quadrant_model, quadrant_b_star, quadrant_grid):
    return build_predictor(quadrant_model, quadrant_b_star, quadrant_grid)


@pytest.fixture(scope="session")
def quadrant_erm(quadrant_train, quadrant_scenario):
    return fit_erm_group(quadrant_train, quadrant_scenario, QUADRANT_TRAIN)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def settings_file(tmp_path):
    """Write a partial settings JSON (merged over the defaults on load) and return its path."""

    def write(data, name="settings.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    return write
