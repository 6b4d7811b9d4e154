import numpy as np
import pytest
from hypothesis import settings

from progseg.geometry import Scene

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def make_scene(coords, instance, semantic=None, colors=None, num_classes=3):
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    instance = np.asarray(instance, dtype=np.int64)
    if semantic is None:
        semantic = np.where(instance >= 0, 0, -1)
    if colors is None:
        colors = np.full((len(coords), 3), 0.5)
    return Scene(coords, np.asarray(colors, dtype=np.float64), instance,
                 np.asarray(semantic, dtype=np.int64), num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one summary line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str):
        _ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
