import os

import pytest

_VERDICTS: list[str] = []


def slow_enabled(tag: str) -> bool:
    """WEAKID_SLOW=1 (or "all") runs every slow check; a comma list such as "8r,9" picks some."""
    raw = os.environ.get("WEAKID_SLOW", "").strip().lower()
    if raw in ("1", "all", "true", "yes"):
        return True
    return tag.lower() in {p.strip() for p in raw.split(",") if p.strip()}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Call as ``verdict(label, ok, detail)``; the line is printed immediately
    and repeated in the terminal summary.
    """
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(label: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'} {label}" + (f": {detail}" if detail else "")
        _VERDICTS.append(line)
        with capman.global_and_fixture_disabled():
            print(f"\n{line}")
        return ok

    return record


@pytest.fixture
def not_run(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(label: str, why: str) -> None:
        line = f"NOT RUN {label}: {why}"
        _VERDICTS.append(line)
        with capman.global_and_fixture_disabled():
            print(f"\n{line}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
