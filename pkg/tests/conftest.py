"""Collects acceptance verdicts and prints them after the run, one line per criterion."""

_VERDICTS: dict[int, tuple[bool, str]] = {}


def record_verdict(number: int, passed: bool, detail: str) -> None:
    _VERDICTS[number] = (passed, detail)
    print(f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        passed, detail = _VERDICTS[number]
        terminalreporter.write_line(f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
