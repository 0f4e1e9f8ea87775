import warnings

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = {}

warnings.filterwarnings("ignore", message=".*TypedStorage.*")


def record(key, passed, detail):
    ACCEPTANCE_LINES[key] = f"criterion {key}: {'PASS' if passed else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(str(k).rstrip("abc")), str(k))):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
