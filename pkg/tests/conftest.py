import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.failed:
        _ACCEPTANCE[name] = "FAIL"
    elif report.when == "call" and name not in _ACCEPTANCE:
        _ACCEPTANCE[name] = "PASS"
    elif report.skipped:
        _ACCEPTANCE.setdefault(name, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        number, *words = name.removeprefix("test_criterion_").split("_")
        terminalreporter.write_line(f"{_ACCEPTANCE[name]}  criterion {int(number):2d}: {' '.join(words)}")
