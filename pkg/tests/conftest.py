import numpy as np
import pytest

from vicet.simulator import BeamPattern, RoomScene, simulate_map

MAP_VANTAGES = [(0, 0), (2, 1), (-2, -1), (2, -1.5), (-2, 1.5)]
MAP_PATTERN = BeamPattern.uniform(720, -40, 30, 48)

# (criterion number, passed, detail), filled in by test_acceptance.py
ACCEPTANCE: list = []


@pytest.fixture(scope="session")
def room():
    return RoomScene((6.0, 4.0, 1.5))


@pytest.fixture(scope="session")
def room_map(room):
    return simulate_map(room, MAP_PATTERN, [np.array([x, y, 0, 0, 0, 0.0]) for x, y in MAP_VANTAGES])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    """Log one acceptance line, echo it, and return whether it passed."""

    def _record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE.append((number, bool(ok), detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return _record
