import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion(request):
    """Print and keep one pass/fail line per acceptance criterion."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(number, title, passed, detail=""):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
