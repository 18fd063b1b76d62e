import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from heightnerf.scenegen import DatasetSpec, SceneSpec, generate_dataset, make_scene

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return make_scene(SceneSpec(n_buildings=2, seed=3))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, small_scene):
    root = tmp_path_factory.mktemp("ds")
    generate_dataset(small_scene, DatasetSpec(num_views=9, image_size=12, n_dense=128, seed=1), root)
    return root


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[n])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
