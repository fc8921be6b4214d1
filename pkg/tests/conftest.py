from contextlib import contextmanager

ACCEPTANCE_LINES: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    """Record one PASS/FAIL line for an acceptance criterion; ``detail`` is filled in by the test."""
    detail: dict = {}
    try:
        yield detail
    except BaseException:
        _record(number, title, False, detail)
        raise
    _record(number, title, True, detail)


def _record(number, title, ok, detail):
    extra = ", ".join(f"{k}={v}" for k, v in detail.items())
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{extra}]" if extra else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
