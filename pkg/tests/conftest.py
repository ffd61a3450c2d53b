import pytest

from livestack import start_stack

VERDICT_LINES: list[str] = []


@pytest.fixture()
def stack(tmp_path):
    st = start_stack(tmp_path)
    yield st
    st.stop()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if VERDICT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in VERDICT_LINES:
            terminalreporter.line(line)
