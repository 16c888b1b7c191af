from pathlib import Path

import numpy as np
import pytest

from fedccl.numerics import init_params

DATA_DIR = Path(__file__).resolve().parents[1] / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_net(rng, sizes=(5, 7, 4, 3)):
    return init_params(list(sizes), rng)


@pytest.fixture
def net(rng):
    return small_net(rng)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
