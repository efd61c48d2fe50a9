from __future__ import annotations

import re

import pytest
import torch

_CRITERIA: dict[str, str] = {}


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def pytest_runtest_logreport(report):
    match = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    key = match.group(1)
    if report.when == "call" or report.outcome != "passed":
        if _CRITERIA.get(key) != "FAIL":
            _CRITERIA[key] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=int):
        terminalreporter.write_line(f"criterion {key}: {_CRITERIA[key]}")
