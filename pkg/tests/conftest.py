import pytest

# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture
def acceptance_report():
    def record(number, passed, detail, soft=False):
        tag = "PASS" if passed else "FAIL"
        kind = "soft" if soft else "gate"
        ACCEPTANCE_LINES.append(f"[{tag}] criterion {number} ({kind}): {detail}")
        print(ACCEPTANCE_LINES[-1])

    return record
