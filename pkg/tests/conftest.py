import os

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_CRITERIA = range(1, 10)
_results: dict[int, tuple[bool, str]] = {}
_ran_acceptance = []


@pytest.fixture
def criterion(request):
    """Record ``(passed, detail)`` for acceptance criterion ``n``; the test still asserts."""
    _ran_acceptance.append(request.node.nodeid)

    def record(n: int, passed: bool, detail: str):
        _results[n] = (bool(passed), detail)
        print(f"CRITERION {n}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ran_acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in ACCEPTANCE_CRITERIA:
        if n in _results:
            ok, detail = _results[n]
            terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
        else:
            terminalreporter.write_line(f"CRITERION {n}: FAIL no result recorded (errored or not run)")
