import contextlib

import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_LINES, [])

    @contextlib.contextmanager
    def record(number, title):
        notes = []
        try:
            yield notes
        except BaseException as e:
            detail = str(e).strip().splitlines()[0] if str(e).strip() else type(e).__name__
            lines.append(f"criterion {number} FAIL  {title}: {detail}")
            print(lines[-1])
            raise
        lines.append(f"criterion {number} PASS  {title}" + (f" ({'; '.join(notes)})" if notes else ""))
        print(lines[-1])

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(ln)
