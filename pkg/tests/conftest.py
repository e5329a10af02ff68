import pytest

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = getattr(item, "criterion_detail", "")
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _CRITERIA[n] = (status, title, detail)
        # one line per criterion in the live output as well as the summary
        print(f"\nACCEPTANCE {n} {status}: {title}" + (f" | {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status} - {title}" + (f" | {detail}" if detail else ""))


@pytest.fixture
def detail(request):
    """Attach a short measured-value summary to the acceptance line of this test."""
    def set_detail(text: str):
        request.node.criterion_detail = text
    return set_detail
