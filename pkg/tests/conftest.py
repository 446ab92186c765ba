"""Prints a one-line pass/fail checklist for the acceptance suite."""

_outcomes = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.failed:
        _outcomes[name] = "FAIL"
    elif report.when == "call" and report.passed:
        _outcomes.setdefault(name, "PASS")
    elif report.skipped:
        _outcomes.setdefault(name, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    try:
        from test_acceptance import CRITERIA
    except ImportError:
        CRITERIA = {}
    terminalreporter.write_sep("=", "acceptance checklist")
    for name, desc in CRITERIA.items():
        status = _outcomes.get(name, "NOT RUN")
        terminalreporter.write_line(f"[{status}] {desc}")
