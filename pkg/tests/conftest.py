import sys

import numpy as np
import pytest

from oracles import small_model


@pytest.fixture
def model():
    return small_model(0)


@pytest.fixture
def images():
    return np.random.default_rng(0).uniform(0.2, 0.8, size=(5, 1, 6, 6))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS and not terminalreporter.stats.get("failed"):
        return
    terminalreporter.section("acceptance criteria")
    for name in mod.CRITERIA:
        if name in mod.VERDICTS:
            ok, detail = mod.VERDICTS[name]
            terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"{name} NOT RUN  (errored before a verdict, or deselected)")
