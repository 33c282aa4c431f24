from __future__ import annotations

import contextlib

ACCEPTANCE: list[tuple[str, bool, str]] = []


class _Outcome:
    detail = ""


@contextlib.contextmanager
def criterion(name: str):
    """Record one acceptance line; PASS unless the body raises."""
    out = _Outcome()
    try:
        yield out
    except BaseException:
        ACCEPTANCE.append((name, False, out.detail))
        raise
    ACCEPTANCE.append((name, True, out.detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
