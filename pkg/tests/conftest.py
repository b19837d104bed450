import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from sparsenvs.scene import CameraIntrinsics, SceneSpec, generate_synthetic_scene  # noqa: E402

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one acceptance line: ``acceptance(name, passed, detail)``."""

    def record(name: str, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE.append((name, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture(scope="session")
def small_scene():
    intr = CameraIntrinsics.from_fov(16, 16, 70.0)
    spec = SceneSpec.random(3)
    views = generate_synthetic_scene(spec, 6, intrinsics=intr)
    return spec, intr, views


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
