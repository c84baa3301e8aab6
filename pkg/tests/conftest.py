import time

import pytest

_LINES: list[str] = []


class Verdict:
    """Collects one PASS/FAIL line per acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.start = time.perf_counter()

    def report(self, ok: bool, detail: str) -> bool:
        secs = time.perf_counter() - self.start
        line = f"[criterion {self.number}] {'PASS' if ok else 'FAIL'} {self.title}: {detail} ({secs:.1f}s)"
        _LINES.append(line)
        print(line)
        return ok


@pytest.fixture
def verdict():
    return Verdict


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
