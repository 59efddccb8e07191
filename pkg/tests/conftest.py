import pytest

from tinerf.data import SynthSpec, synthesize

# (criterion, passed, detail) lines filled in by test_acceptance.py
ACCEPTANCE = []


def record(name: str, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_scene():
    """Four frames of the bouncing ball, 3 train + 1 test views each, 16 px."""
    return synthesize(SynthSpec(n_frames=4, train_views=3, test_views=1, size=16, oracle_n=64))
