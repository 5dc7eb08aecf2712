"""Shared fixtures: simulated streams are expensive, so build them once."""

import numpy as np
import pytest

from photonclock.simulator import (SourceConfig, ClockNoiseModel,
                                   sample_arrivals, encode_sequence,
                                   apply_clock_noise)

LINE_HZ = 1.19e9  # default source: 595 MHz qubits, two pulses per period


@pytest.fixture(scope="session")
def default_source():
    return SourceConfig()


@pytest.fixture(scope="session")
def clean_stream(default_source):
    """1 s at 500 kHz, no bit errors, white jitter only."""
    arr = sample_arrivals(500e3, 1.0, seed=[100, 0])
    enc, truth = encode_sequence(arr, default_source, 0.0, seed=[100, 1])
    noisy = apply_clock_noise(enc, ClockNoiseModel(0.0, 40.0, seed=[100, 2]))
    return noisy, truth


@pytest.fixture(scope="session")
def errored_stream(default_source):
    """0.5 s at 500 kHz with 5% injected Z errors, white jitter only."""
    arr = sample_arrivals(500e3, 0.5, seed=[200, 0])
    enc, truth = encode_sequence(arr, default_source, 0.05, seed=[200, 1])
    noisy = apply_clock_noise(enc, ClockNoiseModel(0.0, 40.0, seed=[200, 2]))
    return noisy, truth
