import pytest

# criterion number -> list of (check, passed, detail)
_CRITERIA: dict[int, list[tuple[str, bool, str]]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance sub-check; the terminal summary aggregates them."""

    def record(number: int, check: str, passed: bool, detail: str = "") -> bool:
        _CRITERIA.setdefault(number, []).append((check, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        checks = _CRITERIA[n]
        ok = all(p for _, p, _ in checks)
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}")
        for name, p, detail in checks:
            tr.write_line(f"    [{'ok' if p else 'FAIL'}] {name}: {detail}")
