from __future__ import annotations

import json
import sys
from importlib import resources
from pathlib import Path

import pytest

PAYLOADS = Path(str(resources.files("cumulus") / "data" / "payloads"))


def load_payload(name: str) -> dict:
    return json.loads((PAYLOADS / name).read_text(encoding="utf-8"))


@pytest.fixture
def payloads_dir() -> Path:
    return PAYLOADS


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("tests.test_acceptance") or sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.report_lines():
        terminalreporter.write_line(line)
