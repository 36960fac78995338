from __future__ import annotations

import numpy as np
import pytest

from paretodistill import env, runtime
from paretodistill.dataset import generate_dataset
from paretodistill.pipeline import load_datasets
from paretodistill.teacher import build_teacher

runtime.tune_allocator()

DESK_SCALE = 0.25
TEACHER_SEED = 56
DATA_SEED = 56


@pytest.fixture(scope="session")
def desk_schema():
    return env.make_schema(DESK_SCALE)


@pytest.fixture(scope="session")
def desk_teacher(desk_schema):
    return build_teacher(desk_schema, TEACHER_SEED)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory, desk_schema, desk_teacher):
    """A few hundred frame groups at desk scale, for unit tests."""
    path = tmp_path_factory.mktemp("small_data")
    generate_dataset(desk_teacher, desk_schema, DATA_SEED, 512, 256, path)
    return path


@pytest.fixture(scope="session")
def small_datasets(small_data):
    return load_datasets(small_data)


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory, desk_schema, desk_teacher):
    """The full desk preset (51,200 train / 5,120 val frame groups)."""
    path = tmp_path_factory.mktemp("desk_data")
    generate_dataset(desk_teacher, desk_schema, DATA_SEED, 51_200, 5_120, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
