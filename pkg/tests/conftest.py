"""Collects one verdict line per acceptance criterion and prints them at the end."""

VERDICTS: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    VERDICTS.append(f"{criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(VERDICTS[-1])


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
