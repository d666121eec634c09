import pytest

_verdicts: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    n, title = marker.args
    if report.failed:
        _verdicts[n] = ("FAIL", title)
    elif report.when == "call" and n not in _verdicts:
        _verdicts[n] = ("PASS", title)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        verdict, title = _verdicts[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}")
