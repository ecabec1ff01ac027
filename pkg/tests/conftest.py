import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: dict[int, tuple[str, str, float, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number, title = mark.args
    reason = ""
    if rep.failed:
        crash = getattr(rep.longrepr, "reprcrash", None)
        reason = crash.message.splitlines()[0] if crash else str(rep.longrepr).splitlines()[-1]
    _RESULTS[number] = ("PASS" if rep.passed else "FAIL", title, rep.duration, reason)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title, secs, reason = _RESULTS[number]
        line = f"{status} criterion {number:>2}: {title} ({secs:.2f} s)"
        if reason:
            line += f" -- {reason}"
        tr.write_line(line)
    passed = sum(r[0] == "PASS" for r in _RESULTS.values())
    tr.write_line(f"{passed}/{len(_RESULTS)} criteria passed")
