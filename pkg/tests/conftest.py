from __future__ import annotations

import functools

import pytest

from llmsched.cost_model import synth_profile
from llmsched.seqdist import load_task
from llmsched.specs import MODELS, ClusterSpec, CostParams

OPT = MODELS["opt-13b"]
CLUSTER4 = ClusterSpec(4, 48e9)


@functools.lru_cache(maxsize=None)
def table_for(profile: str = "a40", model: str = "opt-13b"):
    return synth_profile(MODELS[model], getattr(CostParams, profile)())


@functools.lru_cache(maxsize=None)
def task(name: str):
    return load_task(name)


@pytest.fixture(scope="session")
def opt():
    return OPT


@pytest.fixture(scope="session")
def cluster4():
    return CLUSTER4


@pytest.fixture(scope="session")
def a40():
    return table_for("a40")


@pytest.fixture(scope="session")
def a100():
    return table_for("a100")


# acceptance criterion lines, printed after the run
ACCEPTANCE: dict[int, str] = {}


def report_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
