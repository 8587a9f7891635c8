import numpy as np
import pytest

_ACCEPTANCE = []


@pytest.fixture
def record():
    """Store one acceptance line; printed in the terminal summary."""

    def _record(number, title, ok, detail):
        _ACCEPTANCE.append((number, title, bool(ok), detail))
        print(f"[{number:2d}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        return ok

    return _record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"[{number:2d}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
