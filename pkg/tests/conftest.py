import numpy as np
import pytest


def random_spd(rng, d, ridge=1.0):
    b = rng.standard_normal((d, d))
    return b.T @ b + ridge * np.eye(d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record_acceptance(number, title, ok, detail=""):
    """Store one criterion verdict; printed again in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
