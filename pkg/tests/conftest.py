from __future__ import annotations

import numpy as np
import pytest

from magtable.serialization import load_array, load_supp_table1


@pytest.fixture(scope="session")
def design_a():
    return load_array("fixture:design_a")


@pytest.fixture(scope="session")
def calibrated():
    """Shipped calibration table, per ampere."""
    return load_supp_table1()


@pytest.fixture
def rng():
    return np.random.default_rng(20240521)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
