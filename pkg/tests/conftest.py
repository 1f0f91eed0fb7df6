"""Print one pass/fail line per acceptance criterion at the end of the run."""

_DOCS = {}
_OUTCOMES = {}


def pytest_collection_modifyitems(items):
    for item in items:
        if item.nodeid.startswith("tests/test_acceptance.py") or "test_acceptance.py::" in item.nodeid:
            doc = (getattr(item.function, "__doc__", None) or item.name).strip().splitlines()[0]
            _DOCS[item.nodeid] = doc


def pytest_runtest_logreport(report):
    if report.nodeid not in _DOCS:
        return
    if report.when == "call" or report.failed or report.skipped:
        prev = _OUTCOMES.get(report.nodeid)
        if prev != "FAIL":
            _OUTCOMES[report.nodeid] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, doc in _DOCS.items():
        if nodeid in _OUTCOMES:
            terminalreporter.write_line(f"{_OUTCOMES[nodeid]}  {doc}")
