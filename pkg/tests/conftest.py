import pytest

_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one summary line per acceptance criterion."""

    def record(number: int, name: str, ok: bool | None, detail: str = "") -> None:
        state = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        line = f"criterion {number:2d} {state}  {name}: {detail}"
        _LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
