import re

_CRITERIA: dict[int, tuple[str, str]] = {}
NOTES: list[str] = []


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m or report.when not in ("setup", "call"):
        return
    n = int(m.group(1))
    if report.when == "setup" and report.passed:
        return
    desc = m.group(2).replace("_", " ")
    outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    if _CRITERIA.get(n, ("", "PASS"))[1] != "FAIL":
        _CRITERIA[n] = (desc, outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        desc, outcome = _CRITERIA[n]
        tr.write_line(f"criterion {n:2d}: {outcome}  {desc}")
    for line in NOTES:
        tr.write_line(line)
