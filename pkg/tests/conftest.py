import numpy as np
import pytest

from warmcap.corpus import synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 40/12/12-study dataset shared by the training and CLI tests."""
    root = tmp_path_factory.mktemp("data") / "ds"
    synth_dataset(root, n_train=40, n_val=12, n_test=12, seed=5)
    return root


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def criterion_log():
    """Record one line per acceptance criterion; printed in the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
