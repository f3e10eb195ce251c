import os
from pathlib import Path

import pytest

from modseg.benchmark import run_all, run_variant
from modseg.checkpoint import read_checkpoint

ARTIFACTS = Path(os.environ.get("MODSEG_ARTIFACTS", Path(__file__).resolve().parents[1] / "artifacts" / "desk"))


@pytest.fixture(scope="session")
def desk_dir() -> Path:
    return ARTIFACTS


@pytest.fixture(scope="session")
def desk_results(desk_dir):
    """Full model and both ablations; trained once and cached under artifacts/desk."""
    return run_all(desk_dir)


@pytest.fixture(scope="session")
def desk_model(desk_dir):
    res = run_variant("full", desk_dir)
    return read_checkpoint(res.checkpoint).model


# ------------------------------------------------------------------ acceptance report

N_CRITERIA = 10
_outcomes: dict = {}  # criterion -> list of (test name, passed)
_details: dict = {}  # criterion -> list of measured values
_skipped: set = set()  # criteria with deselected or skipped tests


@pytest.fixture
def record(request):
    """Attach a measured value to the criterion of the calling test."""
    marker = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        _details.setdefault(marker.args[0], []).append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.skipped:
        _skipped.add(marker.args[0])
    elif rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes.setdefault(marker.args[0], []).append((item.name, rep.passed))


def pytest_deselected(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            _skipped.add(marker.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        runs = _outcomes.get(n, [])
        if not runs:
            tr.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        ok = all(p for _, p in runs)
        failed = [name for name, p in runs if not p]
        detail = "; ".join(_details.get(n, []))
        if failed:
            detail = (detail + "; " if detail else "") + "failed: " + ", ".join(failed)
        status = "FAIL" if not ok else "INCOMPLETE" if n in _skipped else "PASS"
        tr.write_line(f"criterion {n:2d}: {status}  {detail}")
