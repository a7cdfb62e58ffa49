import pytest

# criterion number -> (title, outcome, detail)
CRITERIA = {}
DETAILS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to the running criterion test."""
    marker = request.node.get_closest_marker("criterion")

    def note(text):
        DETAILS[marker.args[0]] = text

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        CRITERIA[number] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, outcome = CRITERIA[number]
        extra = f"  [{DETAILS[number]}]" if number in DETAILS else ""
        terminalreporter.write_line(f"criterion {number:2d} {outcome}: {title}{extra}")
