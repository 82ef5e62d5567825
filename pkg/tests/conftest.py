import numpy as np
import pytest

from carpetlab import carpet as cp
from carpetlab import form as fm


@pytest.fixture(scope="session")
def carpet2_3():
    return cp.build_precarpet(cp.CarpetSpec(2, 3))


@pytest.fixture(scope="session")
def carpet2_4():
    return cp.build_precarpet(cp.CarpetSpec(2, 4))


@pytest.fixture(scope="session")
def form2_4(carpet2_4):
    return fm.DirichletForm(carpet2_4)


@pytest.fixture(scope="session")
def carpet3_2():
    return cp.build_precarpet(cp.CarpetSpec(3, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


ACCEPTANCE_LINES: list = []


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
