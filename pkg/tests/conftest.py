"""Shared pytest hooks: surface the acceptance verdict lines in the summary."""

VERDICTS: list[str] = []


def record_verdict(ok: bool, label: str) -> str:
    line = f"[{'PASS' if ok else 'FAIL'}] {label}"
    VERDICTS.append(line)
    return line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
