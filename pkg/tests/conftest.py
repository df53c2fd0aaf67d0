_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _acceptance[report.nodeid] = report


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_acceptance):
        rep = _acceptance[nodeid]
        detail = dict(rep.user_properties).get("detail", "")
        status = "PASS" if rep.passed else "FAIL"
        terminalreporter.write_line(f"{status}  {nodeid.split('::')[-1]}  {detail}")
