import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_VERDICTS: list[tuple[str, bool, str]] = []


class Verdicts:
    """Collects one line per acceptance criterion for the terminal summary."""

    def record(self, name: str, ok: bool, detail: str = "") -> bool:
        _VERDICTS.append((name, bool(ok), detail))
        return bool(ok)


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(_VERDICTS, key=lambda v: int(v[0][1:].split()[0])):
        terminalreporter.write_line(f"{name}: {'PASS' if ok else 'FAIL'}  {detail}")
