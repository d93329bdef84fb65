import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from signal_io import MI_TASK, REST, Marker, Recording, SynthConfig, grid_topology  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_synth():
    """Enough trials for a split and a stream, small enough to generate instantly."""
    return SynthConfig(n_channels=4, n_mi_trials=6, n_rest_trials=4, trial_duration_s=2.0, rng_seed=3)


def make_recording(samples, sample_rate_hz=100.0, markers=(), topology=None):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    channels = tuple(f"ch{k:02d}" for k in range(samples.shape[1]))
    return Recording(
        sample_rate_hz=sample_rate_hz,
        channels=channels,
        samples=samples,
        topology=grid_topology(list(channels)) if topology is None else topology,
        markers=tuple(markers),
    )


@pytest.fixture
def labelled_stream():
    """400 samples: rest [0, 100), MI [100, 300), rest [300, 400)."""
    samples = np.random.default_rng(0).standard_normal((400, 2))
    markers = [Marker(0, 100, REST), Marker(100, 200, MI_TASK), Marker(300, 100, REST)]
    return make_recording(samples, markers=markers, topology={})
