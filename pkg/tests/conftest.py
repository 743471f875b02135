"""Shared fixtures and the per-criterion acceptance summary."""

from collections import OrderedDict

import numpy as np
import pytest

_ACCEPTANCE: "OrderedDict[str, list[tuple[str, str]]]" = OrderedDict()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    label = marker.args[0]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else ("XFAIL" if hasattr(report, "wasxfail") else "FAIL")
        _ACCEPTANCE.setdefault(label, []).append((item.name, status))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for label in sorted(_ACCEPTANCE, key=lambda s: int(s[2:])):
        results = _ACCEPTANCE[label]
        failed = [name for name, status in results if status == "FAIL"]
        verdict = "FAIL" if failed else "PASS"
        detail = f"{len(results) - len(failed)}/{len(results)} checks"
        if failed:
            detail += "; failing: " + ", ".join(failed)
        tr.write_line(f"{label} ... {verdict} ({detail})")
