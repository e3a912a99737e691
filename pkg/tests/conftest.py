import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from sadepth.data import Plane, SyntheticScene, default_scene, generate_synthetic  # noqa: E402
from sadepth.geometry import Intrinsics  # noqa: E402

# lines collected by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture(scope="session")
def plane_sequence():
    """Single textured plane at Z=4 seen by a camera translating along x.

    texel 0.4 gives about 3 px per texel, smooth enough for bilinear resampling.
    """
    k = Intrinsics(28.8, 28.8, 23.5, 15.5, 48, 32)
    scene = SyntheticScene([Plane(depth=4.0, texel=0.4)], k, frame_count=5, step=(0.1, 0.0, 0.0), seed=3)
    return generate_synthetic(scene)


@pytest.fixture(scope="session")
def layered_sequence():
    return generate_synthetic(default_scene(8, seed=0))
