"""Collects acceptance-criterion outcomes and prints one line per criterion at the end."""

_criteria: dict = {}   # nodeid -> (number, title)
_outcomes: dict = {}   # number -> list of outcomes
_details: dict = {}    # number -> list of measured values


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criteria[item.nodeid] = (m.args[0], m.args[1])


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    if report.when == "call" or report.failed or report.skipped:
        n, _ = _criteria[report.nodeid]
        _outcomes.setdefault(n, []).append(report.outcome)
        _details.setdefault(n, []).extend(v for k, v in report.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    titles = {n: t for n, t in _criteria.values()}
    terminalreporter.section("acceptance criteria")
    for n in sorted(titles):
        outs = _outcomes.get(n, [])
        if not outs:
            status = "NOT RUN"
        elif all(o == "passed" for o in outs):
            status = "PASS"
        elif any(o == "failed" for o in outs):
            status = "FAIL"
        else:
            status = "SKIPPED"
        detail = "; ".join(_details.get(n, []))
        terminalreporter.write_line(f"criterion {n}: {status}  {titles[n]}" + (f"  [{detail}]" if detail else ""))
