from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = {}


def record(criterion: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES[criterion] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
