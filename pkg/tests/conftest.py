import pytest

_RESULTS: dict[int, dict] = {}


def criterion_durations() -> dict[int, float]:
    return {n: r["duration"] for n, r in _RESULTS.items()}


def _criterion(item):
    m = item.get_closest_marker("criterion")
    return (m.args[0], m.args[1]) if m else None


def pytest_runtest_makereport(item, call):
    crit = _criterion(item)
    if crit is None:
        return
    n, title = crit
    rec = _RESULTS.setdefault(n, {"title": title, "duration": 0.0, "failed": False, "skipped": False,
                                  "tests": set()})
    rec["duration"] += call.duration
    rec["tests"].add(item.nodeid)
    if call.excinfo is not None:
        if call.excinfo.errisinstance(pytest.skip.Exception):
            rec["skipped"] = True
        else:
            rec["failed"] = True


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        r = _RESULTS[n]
        status = "FAIL" if r["failed"] else ("SKIP" if r["skipped"] else "PASS")
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {r['title']}  ({r['duration']:.1f} s)")
