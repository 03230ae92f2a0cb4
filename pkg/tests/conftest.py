import json
from pathlib import Path

import pytest

from lemmamine.corpus import scan_project

FIXTURES = Path(__file__).parent / "fixtures"
PROJECTS = FIXTURES / "projects"
MONOID = PROJECTS / "monoid"
TOY = PROJECTS / "toy"
CASSETTE = FIXTURES / "monoid_cassette.jsonl"
FAKE_COQC = FIXTURES / "bin" / "coqc"
RESPONSES = FIXTURES / "responses"


@pytest.fixture(scope="session")
def monoid():
    return scan_project(MONOID)


@pytest.fixture(scope="session")
def toy():
    return scan_project(TOY)


def write_config(tmp_path, **extra):
    cfg = {
        "projects": [{"root": str(MONOID)}],
        "cassette": str(CASSETTE),
        "coqc": str(FAKE_COQC),
        "out_dir": str(tmp_path / "out"),
    }
    cfg.update(extra)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        num = int(name.split("_")[2])
        _CRITERIA[num] = (name, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        name, status = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num}: {status}  ({name})")
