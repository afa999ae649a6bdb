"""Per-criterion summary for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(n, "title")`` are grouped by ``n``; a
criterion passes when every test carrying its number passes. Tests can attach
measurements through the ``criterion_note`` fixture, and those notes are echoed
next to the verdict at the end of the run.
"""

from collections import defaultdict

import pytest

_results: dict[int, dict] = defaultdict(lambda: {"title": "", "outcomes": [], "notes": []})


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.fixture
def criterion_note(request):
    marker = request.node.get_closest_marker("criterion")
    if marker is None:
        raise RuntimeError("criterion_note is only available to tests marked with @pytest.mark.criterion")
    notes = _results[marker.args[0]]["notes"]
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    report = outcome.get_result()
    entry = _results[marker.args[0]]
    entry["title"] = marker.args[1] if len(marker.args) > 1 else entry["title"]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        entry["outcomes"].append("skipped" if report.skipped else report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        outcomes = entry["outcomes"]
        if not outcomes:
            continue
        if "failed" in outcomes:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        line = f"criterion {number}: {verdict}  {entry['title']}"
        if entry["notes"]:
            line += "  [" + "; ".join(entry["notes"]) + "]"
        terminalreporter.write_line(line)
