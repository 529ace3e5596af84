"""Shared fixtures plus a per-criterion summary for the acceptance suite."""

from __future__ import annotations

import numpy as np
import pytest

from bbcq.data import generate_dataset
from bbcq.model import ModelSpec, init_model

_acceptance_outcomes: dict[str, str] = {}


@pytest.fixture
def tiny_spec() -> ModelSpec:
    """Smallest model that still has multiple heads and a real MLP."""
    return ModelSpec(num_blocks=1, embed_dim=16, num_heads=2, patch_count=4,
                     num_classes=4, init_seed=7)


@pytest.fixture
def tiny_model(tiny_spec):
    return init_model(tiny_spec)


@pytest.fixture
def tiny_batch(tiny_spec):
    return generate_dataset(6, tiny_spec.patch_count, tiny_spec.embed_dim,
                            tiny_spec.num_classes, seed=5)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(1234))


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid:
        if report.when == "call" or (report.when == "setup" and report.failed):
            _acceptance_outcomes[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion."""
    if not _acceptance_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_acceptance_outcomes):
        outcome = _acceptance_outcomes[nodeid]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(f"{verdict}  {name}")
