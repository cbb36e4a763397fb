import numpy as np
import pytest
import torch

from lma.data import make_synthetic_manifold

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_manifold():
    # 6 orbits x 24 views, a quarter held out
    return make_synthetic_manifold(6, 24, {"rotation", "hue"}, 32, seed=3, holdout_fraction=0.25)


@pytest.fixture(scope="session")
def tiny_manifold():
    return make_synthetic_manifold(4, 10, {"rotation", "hue", "scale", "translation"}, 16, seed=1)


@pytest.fixture
def artifact_root(tmp_path, monkeypatch):
    root = tmp_path / "artifacts"
    monkeypatch.setenv("LMA_ARTIFACT_ROOT", str(root))
    return root


def random_image(rng, size=32):
    return rng.uniform(0, 1, size=(size, size, 3)).astype(np.float32)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; the lines print live and in the summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
