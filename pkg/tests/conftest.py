"""Acceptance-criterion bookkeeping: tests marked ``criterion(n, title)`` are
summarized as one PASS/FAIL line per criterion at the end of the run."""

import os

import pytest

# numba picks the thread count at import; keep runs reproducible on big hosts
os.environ.setdefault("NUMBA_NUM_THREADS", str(min(8, os.cpu_count() or 1)))

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            n, title = mark.args
            _RESULTS.setdefault(n, {"title": title, "outcomes": [], "details": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    entry = _RESULTS[mark.args[0]]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["outcomes"].append(report.outcome)
        detail = getattr(item, "criterion_detail", None)
        if detail:
            entry["details"].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        entry = _RESULTS[n]
        outs = entry["outcomes"]
        if not outs:
            status = "NOT RUN"
        elif all(o == "passed" for o in outs):
            status = "PASS"
        else:
            status = "FAIL"
        detail = "; ".join(entry["details"])
        line = f"AC{n:02d} {status:4s} {entry['title']}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


@pytest.fixture
def record(request):
    """Attach a short measured-value note to the criterion summary line."""
    def _record(text: str) -> None:
        prev = getattr(request.node, "criterion_detail", None)
        request.node.criterion_detail = f"{prev}, {text}" if prev else text
    return _record
