import numpy as np
import pytest

from slimtensor.model import RadianceModel
from slimtensor.scene import generate_scene, make_dataset
from slimtensor.vm_grid import TensorField

UNIT_BOX = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def small_field(res=(4, 5, 3), rank=2, F=5, seed=0, scale=1.0, bbox=UNIT_BOX) -> TensorField:
    return TensorField.random(res, bbox, rank, F, np.random.default_rng(seed), scale=scale)


def small_model(res=(4, 4, 4), rank=2, r_d=1, seed=0, **kw) -> RadianceModel:
    kw.setdefault("init_scale", 1.0)
    kw.setdefault("density_shift", 0.0)
    kw.setdefault("distance_scale", 1.0)
    kw.setdefault("app_feature_dim", 6)
    kw.setdefault("hidden", 16)
    return RadianceModel.create(res, UNIT_BOX, rank, np.random.default_rng(seed), r_d=r_d, **kw)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small 16x16 dataset of the default scene for fast training tests."""
    root = tmp_path_factory.mktemp("tiny")
    return make_dataset(generate_scene(0), root, n_train=6, n_test=2, size=16, samples_per_ray=128)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
