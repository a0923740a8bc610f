import pytest

_CRITERIA: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    props = dict(item.user_properties)
    if rep.skipped:
        status = "SKIP"
    elif rep.passed:
        status = props.get("status", "PASS")
    else:
        status = "FAIL"
    _CRITERIA.append((mark.args[0], status, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {label:<10} {status:<22} {detail}")
