import re

_CRITERIA: dict[int, dict] = {}
_NAME = re.compile(r"test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m or (report.when != "call" and not report.failed):
        return
    entry = _CRITERIA.setdefault(int(m.group(1)), {"ok": True, "notes": []})
    if report.failed:
        entry["ok"] = False
    entry["notes"] += [str(v) for k, v in report.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {'; '.join(e['notes'])}")
