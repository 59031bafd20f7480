import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# (number, title) -> (passed, detail); filled by tests marked ``criterion``
_CRITERIA: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    key = tuple(marker.args)
    detail = dict(item.user_properties).get("detail", "")
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        if rep.failed and not detail:
            detail = str(rep.longrepr.reprcrash.message if hasattr(rep.longrepr, "reprcrash") else rep.longrepr)
        _CRITERIA[key] = (rep.passed, detail.splitlines()[0] if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), (ok, detail) in sorted(_CRITERIA.items()):
        terminalreporter.write_line(f"criterion {num} [{title}]: {'PASS' if ok else 'FAIL'}  {detail}")
