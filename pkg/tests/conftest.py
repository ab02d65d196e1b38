"""Collect one summary line per acceptance criterion and print them at the end of the session."""

import os
import re

# Keep BLAS single-threaded so timings and reductions match across machines.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

_LINES: list[tuple[int, str]] = []
_CRITERION = re.compile(r"test_criterion_(\d+)_")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    detail = dict(report.user_properties).get("detail", "")
    status = "PASS" if report.outcome == "passed" else "FAIL"
    _LINES.append((int(match.group(1)), f"criterion {int(match.group(1)):>2}: {status}  {detail}".rstrip()))


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES):
        terminalreporter.write_line(line)
