import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record ``(label, passed, detail)`` for the end-of-run acceptance summary."""

    def record(label, passed, detail=""):
        _VERDICTS[label] = (bool(passed), detail)
        print(f"{label}: {'PASS' if passed else 'FAIL'} {detail}".rstrip())
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_VERDICTS, key=lambda s: (len(s), s)):
        passed, detail = _VERDICTS[label]
        terminalreporter.write_line(f"{label}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip())
