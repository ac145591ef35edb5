from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_RESULTS: dict[str, list] = {}
_ORDER: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion covered by the test")
    config.addinivalue_line("markers", "info: reported but not asserted")


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    return mark.args[0] if mark else None


def pytest_collection_modifyitems(config, items):
    for item in items:
        name = _criterion(item)
        if name and name not in _ORDER:
            _ORDER.append(name)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    name = _criterion(item)
    if name is None:
        return
    # failures in setup (e.g. a toy run crashing) count against the criterion too
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        if rep.failed:
            msg = str(rep.longrepr).strip().splitlines()
            detail = (detail + " | " if detail else "") + (msg[-1] if msg else "")
        status = "INFO" if item.get_closest_marker("info") else ("PASS" if rep.passed else "FAIL")
        if rep.skipped:
            status = "SKIP"
        _RESULTS.setdefault(name, []).append((status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name in _ORDER:
        entries = _RESULTS.get(name)
        if not entries:
            continue
        statuses = {s for s, _ in entries}
        if "FAIL" in statuses:
            status = "FAIL"
        elif statuses == {"INFO"}:
            status = "INFO"
        elif "SKIP" in statuses:
            status = "SKIP"
        else:
            status = "PASS"
        detail = " ; ".join(d for _, d in entries if d)
        tr.write_line(f"{status}  {name}" + (f"  -- {detail}" if detail else ""))
