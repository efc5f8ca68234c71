import numpy as np
import pytest

from acmixkit.tensor import BatchNormParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_bn(rng, c, eps=1e-3):
    return BatchNormParams(rng.uniform(0.5, 1.5, c), rng.normal(0, 0.2, c), rng.normal(0, 0.2, c),
                           rng.uniform(0.5, 1.5, c), eps)


# (criterion number, title, passed, detail), filled in by test_acceptance.py
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {num:2d} {title}: {detail}")
