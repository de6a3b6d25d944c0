"""Shared pytest hooks: the acceptance criteria verdicts are repeated in the terminal summary."""

ACCEPTANCE_VERDICTS: dict[int, str] = {}


def record_verdict(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_VERDICTS[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_VERDICTS):
        terminalreporter.write_line(ACCEPTANCE_VERDICTS[number])
