import numpy as np
import pytest

from sparsegs.scenes import random_cloud, simple_camera

VERDICTS: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
    VERDICTS.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cam32():
    return simple_camera(32, 30.0)


@pytest.fixture
def small_cloud():
    return random_cloud(np.random.default_rng(7), 10)
