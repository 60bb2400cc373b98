from __future__ import annotations

import re

import pytest

_CRITERIA: dict[int, tuple[str, str, str]] = {}
_NAME = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        status = {"passed": "PASS", "failed": "FAIL"}.get(report.outcome, report.outcome.upper())
        _CRITERIA[int(m.group(1))] = (m.group(2), status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        name, status, detail = _CRITERIA[num]
        line = f"criterion {num:2d} {status}  {name}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)


@pytest.fixture(scope="session")
def run_cache():
    """Training runs shared across acceptance tests, keyed by override tuples."""
    from signlock.trainer import TrainConfig, train

    cache = {}

    def get(**overrides):
        key = tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in overrides.items()))
        if key not in cache:
            cfg = TrainConfig().with_overrides({"track.record_traces": False, **overrides})
            cache[key] = train(cfg)
        return cache[key]

    return get
