import os

os.environ.setdefault("MSGBART_MODE", "f64")

import numpy as np
import pytest

from msgbart import tensor as T


@pytest.fixture(autouse=True)
def f64_mode():
    T.set_mode("f64")
    yield
    T.set_mode("f64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the summary prints them after the run."""

    def record(number, name, passed, detail=""):
        ACCEPTANCE.append((number, name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for number, name, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {name}: {detail}")
