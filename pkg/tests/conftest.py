from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import replace

import pytest

from wiselab.harness.config import default_config
from wiselab.harness.experiment import run_experiment

CRITERIA = {
    1: "linear-head weight/output-space equivalence",
    2: "linear equivalence and nonlinear witness",
    3: "EMA recovery identity",
    4: "gradient oracle",
    5: "Clopper-Pearson oracle",
    6: "metric identities",
    7: "interpolation curve on the default config",
    8: "determinism of run",
    9: "k-shot regime",
}

_outcomes: dict[int, list[bool]] = defaultdict(list)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes[marker.args[0]].append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {title}")


_elapsed: dict[str, float] = {}


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Output directory of one full run of the shipped config."""
    start = time.perf_counter()
    out = run_experiment(default_config(), tmp_path_factory.mktemp("run") / "a")
    _elapsed["default"] = time.perf_counter() - start
    return out


@pytest.fixture(scope="session")
def default_run_seconds(default_run):
    return _elapsed["default"]


@pytest.fixture(scope="session")
def default_run_repeat(tmp_path_factory):
    return run_experiment(default_config(), tmp_path_factory.mktemp("run") / "b")


@pytest.fixture(scope="session")
def one_shot_run(tmp_path_factory):
    cfg = replace(default_config(), k_shot=1, baselines_to_run=())
    return run_experiment(cfg, tmp_path_factory.mktemp("run") / "k1")
