import pytest

ACCEPTANCE: dict = {}


@pytest.fixture
def criterion(request):
    """Record an acceptance criterion's outcome for the end-of-run summary."""
    name, detail = request.node.get_closest_marker("criterion").args
    info = {"detail": detail, "measured": ""}
    ACCEPTANCE[name] = ("FAIL", info)
    yield info
    if getattr(request.node, "rep_call_passed", False):
        ACCEPTANCE[name] = ("PASS", info)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call_passed = rep.passed


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name, detail): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n[2:])):
        status, info = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {status}: {info['detail']} {info['measured']}".rstrip())
