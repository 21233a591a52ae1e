"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

_RESULTS: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    n = int(props["criterion"])
    if report.when == "call" or (report.when == "setup" and report.failed):
        status = "PASS" if report.passed else "FAIL"
        detail = props.get("detail", "")
        if report.failed and not detail:
            detail = report.longreprtext.strip().splitlines()[-1] if report.longreprtext else "error"
        _RESULTS[n] = (status, props.get("title", ""), detail)


def pytest_collection_modifyitems(items):
    # expose the criterion number before the test runs so setup failures are attributed
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))
            item.user_properties.append(("title", mark.args[1]))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, detail = _RESULTS[n]
        terminalreporter.write_line(f"{status} criterion {n:2d} {title}: {detail}")
