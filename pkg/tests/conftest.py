import re

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------------ acceptance summary

_CRITERION = re.compile(r"test_(a\d+)_")
_acceptance: dict[str, dict] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    m = _CRITERION.search(report.nodeid.split("::")[-1])
    if m is None:
        return
    entry = _acceptance.setdefault(m.group(1).upper(), {"failed": False, "ran": False,
                                                        "details": []})
    if report.failed:
        entry["failed"] = True
    if report.when == "call":
        entry["ran"] = entry["ran"] or not report.skipped
        entry["details"].extend(str(v) for k, v in report.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance, key=lambda s: int(s[1:])):
        e = _acceptance[name]
        status = "FAIL" if e["failed"] else ("PASS" if e["ran"] else "SKIP")
        terminalreporter.write_line(f"{name} {status}")
        for d in e["details"]:
            terminalreporter.write_line(f"    {d}")
