import dataclasses
from importlib import resources

import numpy as np
import pytest

from scancycle.simnet import FlowSpec, OverheadModel, PlantConfig, PlcProfile, load_plant, simulate, with_seed


def swat6_path():
    return resources.files("scancycle").joinpath("data/swat6.json")


@pytest.fixture(scope="session")
def swat6() -> PlantConfig:
    return load_plant(swat6_path())


def toy_plant(tsc=4.0, resp=1.0, jitter=0.0, que=0.0, que_std=0.0, resp_std=0.0, duration=2.0, seed=0,
              watchdog=500.0):
    prof = [
        PlcProfile(1, tsc * 0.25, tsc * 0.5, tsc * 0.25, jitter_std=jitter, watchdog_ms=watchdog),
        PlcProfile(2, 1.0, 2.0, 1.0),
    ]
    flows = [FlowSpec(1, 2, "T-1", resp, resp_std)]
    return PlantConfig(prof, flows, OverheadModel(t_que_mean_ms=que, t_que_std_ms=que_std), duration, seed)


@pytest.fixture(scope="session")
def swat6_trace(swat6):
    return simulate(dataclasses.replace(with_seed(swat6, 11), duration_s=120.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
