import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def tiny_config(**sections):
    """A few small scenes on a coarse grid; seconds per run."""
    from v2xfuse.harness.config import ExperimentConfig

    base = dict(grid={"height": 12, "width": 24, "resolution": 1.2},
                model={"channels": 4},
                data={"train_scenes": 4, "eval_scenes": 3, "train_ap_scenes": 2, "clutter_points": 100},
                optim={"epochs": 1, "teacher_epochs": 1, "batch_size": 2, "decay_epochs": (1,)})
    for k, v in sections.items():
        base[k] = {**base.get(k, {}), **v} if isinstance(v, dict) else v
    return ExperimentConfig().replace(**base)


@pytest.fixture
def tiny():
    return tiny_config()


# one line per acceptance criterion, printed after the run whatever the capture mode
ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance():
    def record(number, ok, detail):
        ACCEPTANCE_LINES.append((number, f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"))
        print(ACCEPTANCE_LINES[-1][1])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
