import numpy as np
import pytest

from voxelforge.voxel import Dims, VoxelGrid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_grid(rng, shape=(4, 4, 4), fill=0.5, pitch=10.0):
    return VoxelGrid(Dims(*shape), rng.random(shape) < fill, pitch)


ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
