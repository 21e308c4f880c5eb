from pathlib import Path

import pytest

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# criterion number -> (passed, summary line)
_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Record a criterion verdict; the line is printed now and again in the terminal summary."""

    def _record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = (passed, line)
        print(line)
        return passed

    return _record


@pytest.fixture
def configs():
    return CONFIGS


def pytest_runtest_makereport(item, call):
    # a criterion test that raised before recording still gets a FAIL line
    number = getattr(item.function, "criterion", None)
    if number is not None and call.when == "call" and call.excinfo is not None and number not in _ACCEPTANCE:
        _ACCEPTANCE[number] = (False, f"criterion {number:2d}: FAIL  raised {call.excinfo.typename}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number][1])
