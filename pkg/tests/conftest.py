from __future__ import annotations

import time
from dataclasses import dataclass

import pytest

from qlio.odometry import count_input_sweeps, run_odometry
from qlio.synthetic import SensorNoise, generate_synthetic


@dataclass
class Run:
    data: object
    config: object
    records: list
    metrics: object
    seconds: float
    input_sweeps: int


def run_synthetic(synth, **overrides) -> Run:
    cfg = synth.config.with_overrides(**overrides)
    start = time.perf_counter()
    records, metrics = run_odometry(cfg, synth.dataset)
    seconds = time.perf_counter() - start
    return Run(synth.dataset, cfg, records, metrics, seconds, count_input_sweeps(synth.dataset, cfg))


@pytest.fixture(scope="session")
def smooth_synth():
    """Box room, 10 s smooth trajectory, realistic sensor noise."""
    return generate_synthetic("box", "smooth", 10.0, seed=1)


@pytest.fixture(scope="session")
def smooth_run(smooth_synth):
    return run_synthetic(smooth_synth)


@pytest.fixture(scope="session")
def smooth_run_standard(smooth_synth):
    return run_synthetic(smooth_synth, quantize=False)


@pytest.fixture(scope="session")
def short_synth():
    """Box room, 3 s smooth trajectory: 30 input sweeps."""
    return generate_synthetic("box", "smooth", 3.0, seed=2)


@pytest.fixture(scope="session")
def short_runs(short_synth):
    return run_synthetic(short_synth, reuse=True), run_synthetic(short_synth, reuse=False)


@pytest.fixture(scope="session")
def stationary_synth():
    return generate_synthetic("box", "stationary", 3.0, seed=3)


@pytest.fixture(scope="session")
def stationary_zero_noise_synth():
    return generate_synthetic("box", "stationary", 2.0, noise=SensorNoise.zero(), seed=4)
