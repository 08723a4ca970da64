import json
from pathlib import Path

import numpy as np
import pytest

from mixstab.closures import ClosureModel, ModelKind, PhysicalConstants

FIXTURES = Path(__file__).parent / "fixtures"
MODEL_NAMES = [k.value for k in ModelKind]
PRESET_NAMES = ["PP81", "OPA"]

# Acceptance lines collected by test_acceptance.py, printed after the run.
ACCEPTANCE_LINES = {}


def load_fixture(name):
    return json.loads((FIXTURES / name).read_text())


@pytest.fixture(params=MODEL_NAMES)
def model(request):
    return ClosureModel.named(request.param)


@pytest.fixture
def constants():
    return PhysicalConstants()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
