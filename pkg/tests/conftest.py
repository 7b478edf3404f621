"""Per-criterion summary for the acceptance module.

Acceptance tests are named ``test_criterion_<N>_...``; a criterion passes when
all of its tests pass.  Tests attach measured values with ``record_property``
under the key ``detail`` and those are echoed next to the verdict.
"""

import re
from collections import defaultdict

_NAME = re.compile(r"test_criterion_(\d+)_")
_outcomes = defaultdict(list)
_details = defaultdict(list)


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m or "test_acceptance" not in report.nodeid:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        _outcomes[n].append(report.outcome)
    if report.when == "call":
        _details[n] += [v for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        ok = all(o == "passed" for o in _outcomes[n])
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}"
        if _details[n]:
            line += "  (" + "; ".join(_details[n]) + ")"
        tr.write_line(line)
