import sys

import numpy as np
import pytest

from mrp_sero import ingest, simulate
from mrp_sero.model import Estimated, Fixed, ModelKind, ModelSpec


@pytest.fixture(scope="session")
def pcr_priors():
    return ingest.bundled_pcr_priors()


@pytest.fixture(scope="session")
def small_sim():
    return simulate.generate(simulate.TruthConfig(seed=7, n_weeks=4, tests_per_week=150))


@pytest.fixture(params=[
    (ModelKind.PCR, "fixed"), (ModelKind.PCR, "estimated"),
    (ModelKind.IGG, "fixed"), (ModelKind.IGG, "estimated"),
], ids=lambda p: f"{p[0].value}-{p[1]}")
def any_spec(request, pcr_priors):
    kind, mis = request.param
    misclass = Fixed(0.8, 0.99) if mis == "fixed" else Estimated(pcr_priors)
    return ModelSpec(kind, 4, misclass)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
