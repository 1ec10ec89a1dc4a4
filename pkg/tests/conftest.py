import numpy as np
import pytest

_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Store the outcome of one acceptance criterion for the summary lines."""

    def _record(key: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE[key] = (bool(passed), detail)
        print(f"{key}: {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)

    return _record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE, key=lambda k: (len(k.split()[0]), k)):
        ok, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
