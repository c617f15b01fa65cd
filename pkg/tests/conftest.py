import pytest

_ACCEPTANCE = []


@pytest.fixture
def record_criterion(request):
    """Call with (number, passed, detail); a summary line per criterion is printed at the end."""

    def record(number, passed, detail=""):
        _ACCEPTANCE.append((number, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
