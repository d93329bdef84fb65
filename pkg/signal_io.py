"""
EEG recordings: canonical on-disk format, synthetic generator, continuous streams.

A recording on disk is two files sharing a stem:
    <name>.json   UTF-8 metadata (sample rate, channels, topology, markers)
    <name>.f32    little-endian float32 samples, time-major
                  (sample 0 channel 0, sample 0 channel 1, ...)

Usage:
    from signal_io import SynthConfig, synth_generate, compose_continuous, save_recording

    mi_trials, rest_trials = synth_generate(SynthConfig(rng_seed=7))
    stream = compose_continuous(mi_trials, rest_trials, rng_seed=7, min_rest_s=2, max_rest_s=6)
    save_recording(stream, "runs/default/synth/stream")
"""

import json
import math
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from checkpoint import atomic_write_bytes, atomic_write_text

MI_TASK = "mi_task"
REST = "rest"
LABELS = (MI_TASK, REST)

# Band used to check that synthetic MI trials carry the configured burst power
MU_BAND_HZ = (8.0, 12.0)

HEADER_KEYS = ('sample_rate_hz', 'n_samples', 'n_channels', 'channels')


# ============ Domain Types ============

@dataclass(frozen=True)
class Marker:
    onset_sample: int
    duration_samples: int
    label: str

    def __post_init__(self):
        if self.onset_sample < 0:
            raise ValueError(f"marker onset must be >= 0, got {self.onset_sample}")
        if self.duration_samples < 1:
            raise ValueError(f"marker duration must be >= 1, got {self.duration_samples}")
        if self.label not in LABELS:
            raise ValueError(f"marker label must be one of {LABELS}, got {self.label!r}")

    @property
    def end_sample(self) -> int:
        return self.onset_sample + self.duration_samples

    def to_dict(self) -> dict:
        return {
            'onset_sample': self.onset_sample,
            'duration_samples': self.duration_samples,
            'label': self.label,
        }


@dataclass(frozen=True)
class Recording:
    """
    Multichannel EEG with its electrode topology and ground-truth markers.

    `samples` is stored as a read-only float64 array of shape
    [n_samples x n_channels]; values are in microvolts.
    """
    sample_rate_hz: float
    channels: tuple[str, ...]
    samples: np.ndarray
    topology: dict[str, tuple[str, ...]] = field(default_factory=dict)
    markers: tuple[Marker, ...] = ()

    def __post_init__(self):
        channels = tuple(self.channels)
        samples = np.array(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[:, None]
        samples.flags.writeable = False
        topology = {name: tuple(neighbors) for name, neighbors in self.topology.items()}
        markers = tuple(sorted(self.markers, key=lambda m: m.onset_sample))

        object.__setattr__(self, 'channels', channels)
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'topology', topology)
        object.__setattr__(self, 'markers', markers)
        self._validate()

    def _validate(self) -> None:
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be 2-D, got shape {self.samples.shape}")
        if self.samples.shape[0] < 1:
            raise ValueError("recording must contain at least one sample")
        if self.samples.shape[1] != len(self.channels):
            raise ValueError(
                f"samples have {self.samples.shape[1]} columns but "
                f"{len(self.channels)} channels are named"
            )
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("channel names must be unique")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite sample in recording")

        known = set(self.channels)
        for name, neighbors in self.topology.items():
            if name not in known:
                raise ValueError(f"topology names unknown channel {name!r}")
            for neighbor in neighbors:
                if neighbor not in known:
                    raise ValueError(f"unknown neighbor channel {neighbor!r} of {name!r}")

        previous_end = 0
        for marker in self.markers:
            if marker.onset_sample < previous_end:
                raise ValueError(f"overlapping markers at sample {marker.onset_sample}")
            if marker.end_sample > self.n_samples:
                raise ValueError(
                    f"marker [{marker.onset_sample}, {marker.end_sample}) exceeds "
                    f"{self.n_samples} samples"
                )
            previous_end = marker.end_sample

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    def replace_samples(self, samples: np.ndarray, channels: tuple[str, ...] | None = None,
                        keep_topology: bool = True) -> "Recording":
        """New recording with the same sample rate and markers but different data."""
        return Recording(
            sample_rate_hz=self.sample_rate_hz,
            channels=self.channels if channels is None else channels,
            samples=samples,
            topology=self.topology if keep_topology else {},
            markers=self.markers,
        )


@dataclass
class SynthConfig:
    n_channels: int = 8
    sample_rate_hz: float = 100.0
    mi_burst_freq_hz: float = 10.0
    mi_amplitude_gain: float = 50.0
    noise_exponent: float = 1.0          # pink noise, 1/f^alpha
    noise_amplitude_uv: float = 10.0
    active_channel_fraction: float = 0.5
    trial_duration_s: float = 4.0
    n_mi_trials: int = 80
    n_rest_trials: int = 40
    rng_seed: int = 0

    def validate(self) -> None:
        if self.n_channels < 1:
            raise ValueError(f"synth.n_channels must be >= 1, got {self.n_channels}")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"synth.sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not 0 < self.mi_burst_freq_hz < self.sample_rate_hz / 2:
            raise ValueError(
                f"synth.mi_burst_freq_hz must be in (0, {self.sample_rate_hz / 2}), "
                f"got {self.mi_burst_freq_hz}"
            )
        if self.mi_amplitude_gain < 0:
            raise ValueError(f"synth.mi_amplitude_gain must be >= 0, got {self.mi_amplitude_gain}")
        if not 0 < self.active_channel_fraction <= 1:
            raise ValueError(
                f"synth.active_channel_fraction must be in (0, 1], got {self.active_channel_fraction}"
            )
        if self.noise_amplitude_uv <= 0:
            raise ValueError(f"synth.noise_amplitude_uv must be positive, got {self.noise_amplitude_uv}")
        if round(self.trial_duration_s * self.sample_rate_hz) < 2:
            raise ValueError("synth.trial_duration_s is shorter than two samples")
        if self.n_mi_trials < 0 or self.n_rest_trials < 0:
            raise ValueError("synth trial counts must be >= 0")

    @property
    def trial_samples(self) -> int:
        return int(round(self.trial_duration_s * self.sample_rate_hz))

    @property
    def n_active_channels(self) -> int:
        return math.ceil(self.active_channel_fraction * self.n_channels)


# ============ Canonical File Format ============

def _stem_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in ('.json', '.f32'):
        path = path.with_suffix('')
    return path.with_name(path.name + '.json'), path.with_name(path.name + '.f32')


def load_recording(path: str | Path) -> Recording:
    """
    Load a recording from its `.json` metadata sidecar and `.f32` payload.

    Raises:
        FileNotFoundError: either file is missing
        ValueError: header/payload mismatch, non-finite sample, bad topology or markers
    """
    meta_path, data_path = _stem_paths(path)
    for p in (meta_path, data_path):
        if not p.exists():
            raise FileNotFoundError(f"recording file not found: {p}")

    with open(meta_path, 'r', encoding='utf-8') as f:
        meta = json.load(f)

    missing = [key for key in HEADER_KEYS if key not in meta]
    if missing:
        raise ValueError(f"{meta_path}: header is missing {', '.join(missing)}")
    n_samples = int(meta['n_samples'])
    n_channels = int(meta['n_channels'])
    channels = list(meta['channels'])
    if len(channels) != n_channels:
        raise ValueError(f"header lists {len(channels)} channel names but n_channels={n_channels}")

    raw = data_path.read_bytes()
    if len(raw) % 4 != 0:
        raise ValueError(f"payload size {len(raw)} is not a multiple of 4 bytes")
    payload = np.frombuffer(raw, dtype='<f4')
    if payload.size != n_samples * n_channels:
        raise ValueError(
            f"sample-count mismatch: header says {n_samples}x{n_channels} = "
            f"{n_samples * n_channels} values, payload has {payload.size}"
        )

    return Recording(
        sample_rate_hz=float(meta['sample_rate_hz']),
        channels=tuple(channels),
        samples=payload.reshape(n_samples, n_channels).astype(np.float64),
        topology={name: tuple(nbrs) for name, nbrs in meta.get('topology', {}).items()},
        markers=tuple(Marker(**m) for m in meta.get('markers', [])),
    )


def save_recording(rec: Recording, path: str | Path) -> None:
    """Write `rec` as `<path>.json` + `<path>.f32`; `load_recording` inverts it."""
    meta_path, data_path = _stem_paths(path)
    meta = {
        'sample_rate_hz': float(rec.sample_rate_hz),
        'n_samples': rec.n_samples,
        'n_channels': rec.n_channels,
        'channels': list(rec.channels),
        'topology': {name: list(nbrs) for name, nbrs in rec.topology.items()},
        'markers': [m.to_dict() for m in rec.markers],
    }
    atomic_write_bytes(data_path, rec.samples.astype('<f4').tobytes(order='C'))
    atomic_write_text(meta_path, json.dumps(meta, indent=2) + '\n')


# ============ Synthetic Generator ============

def grid_topology(channels: list[str]) -> dict[str, tuple[str, ...]]:
    """4-connected neighbours of channels laid row-major on a square grid."""
    n = len(channels)
    n_cols = math.ceil(math.sqrt(n))
    topology = {}
    for idx, name in enumerate(channels):
        row, col = divmod(idx, n_cols)
        neighbors = []
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            r, c = row + dr, col + dc
            if 0 <= c < n_cols and r >= 0:
                other = r * n_cols + c
                if other < n:
                    neighbors.append(channels[other])
        topology[name] = tuple(neighbors)
    return topology


def _spectral_weights(n_samples: int, exponent: float) -> np.ndarray:
    freqs = np.fft.rfftfreq(n_samples)
    weights = np.zeros_like(freqs)
    weights[1:] = freqs[1:] ** (-exponent / 2)
    if n_samples % 2 == 0:
        weights[-1] = 0.0  # no Nyquist term
    return weights


def _expected_band_fraction(n_samples: int, sample_rate_hz: float, exponent: float,
                            band: tuple[float, float]) -> float:
    """Expected share of unit-variance noise power falling inside `band`."""
    weights = _spectral_weights(n_samples, exponent)
    freqs_hz = np.fft.rfftfreq(n_samples, d=1.0 / sample_rate_hz)
    in_band = (freqs_hz >= band[0]) & (freqs_hz <= band[1])
    return float(np.sum(weights[in_band] ** 2) / np.sum(weights ** 2))


def _pink_noise(rng: np.random.Generator, n_samples: int, n_channels: int,
                exponent: float) -> np.ndarray:
    """Gaussian 1/f^exponent noise with unit expected variance per channel."""
    weights = _spectral_weights(n_samples, exponent)
    scale = n_samples / np.sqrt(2.0 * np.sum(weights ** 2))
    shape = (weights.size, n_channels)
    spectrum = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    spectrum *= (weights * scale)[:, None]
    return np.fft.irfft(spectrum, n=n_samples, axis=0)


def synth_generate(cfg: SynthConfig) -> tuple[list[Recording], list[Recording]]:
    """
    Generate ERD/ERS-like MI trials and rest trials.

    MI trials add one sinusoidal source at `mi_burst_freq_hz` to the first
    ceil(active_channel_fraction * n_channels) channels, in phase across
    them with a random phase per trial; its amplitude puts
    `mi_amplitude_gain` times the expected noise power of the 8-12 Hz band
    on top of it. Rest trials are pink noise only. Samples are rounded to
    float32 so generated recordings round-trip through disk exactly.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.rng_seed)
    fs = cfg.sample_rate_hz
    n = cfg.trial_samples
    channels = [f"ch{i:02d}" for i in range(cfg.n_channels)]
    topology = grid_topology(channels)

    band_fraction = _expected_band_fraction(n, fs, cfg.noise_exponent, MU_BAND_HZ)
    burst_amplitude = cfg.noise_amplitude_uv * np.sqrt(2.0 * cfg.mi_amplitude_gain * band_fraction)
    t = np.arange(n) / fs

    def make_trial(label: str) -> Recording:
        noise = cfg.noise_amplitude_uv * _pink_noise(rng, n, cfg.n_channels, cfg.noise_exponent)
        phase = rng.uniform(0.0, 2 * np.pi)
        if label == MI_TASK:
            burst = burst_amplitude * np.sin(2 * np.pi * cfg.mi_burst_freq_hz * t + phase)
            noise[:, :cfg.n_active_channels] += burst[:, None]
        return Recording(
            sample_rate_hz=fs,
            channels=tuple(channels),
            samples=noise.astype(np.float32).astype(np.float64),
            topology=topology,
            markers=(Marker(0, n, label),),
        )

    mi_trials = [make_trial(MI_TASK) for _ in range(cfg.n_mi_trials)]
    rest_trials = [make_trial(REST) for _ in range(cfg.n_rest_trials)]
    return mi_trials, rest_trials


def band_power(samples: np.ndarray, sample_rate_hz: float, low_hz: float, high_hz: float) -> np.ndarray:
    """One-sided periodogram power inside [low_hz, high_hz], per channel."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    n = samples.shape[0]
    spectrum = np.fft.rfft(samples, axis=0)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate_hz)
    in_band = (freqs >= low_hz) & (freqs <= high_hz) & (freqs > 0)
    if n % 2 == 0:
        in_band &= np.arange(freqs.size) < freqs.size - 1
    return 2.0 * np.sum(np.abs(spectrum[in_band]) ** 2, axis=0) / n ** 2


def split_trials(trials: list[Recording], train_fraction: float = 0.70,
                 rng_seed: int = 0) -> tuple[list[Recording], list[Recording]]:
    """Shuffled train/test split; both halves keep the original trial order."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if len(trials) < 2:
        raise ValueError(f"need at least 2 trials to split, got {len(trials)}")
    n_train = min(max(int(round(train_fraction * len(trials))), 1), len(trials) - 1)
    train_idx, test_idx = train_test_split(np.arange(len(trials)), train_size=n_train, random_state=rng_seed)
    return [trials[i] for i in sorted(train_idx)], [trials[i] for i in sorted(test_idx)]


# ============ Continuous Streams ============

def _check_compatible(trials: list[Recording], reference: Recording) -> None:
    for trial in trials:
        if trial.channels != reference.channels:
            raise ValueError("incompatible channel sets between trials")
        if trial.sample_rate_hz != reference.sample_rate_hz:
            raise ValueError(
                f"incompatible sample rates: {trial.sample_rate_hz} vs {reference.sample_rate_hz}"
            )


def compose_continuous(mi_trials: list[Recording], rest_trials: list[Recording], rng_seed: int,
                       min_rest_s: float, max_rest_s: float) -> Recording:
    """
    Interleave MI trials with rest segments of random duration.

    A leading rest segment is drawn with probability 1/2; every pair of
    consecutive MI trials is separated by a rest segment. Rest durations are
    uniform in [min_rest_s, max_rest_s]; rest material is taken cyclically
    from the rest trials, visited in a seed-dependent order. Zero-length
    rests are dropped. Markers partition the output timeline.
    """
    if not mi_trials:
        raise ValueError("compose_continuous needs at least one MI trial")
    if min_rest_s < 0 or max_rest_s < min_rest_s:
        raise ValueError(f"invalid rest range [{min_rest_s}, {max_rest_s}] s")
    reference = mi_trials[0]
    _check_compatible(mi_trials, reference)
    _check_compatible(rest_trials, reference)
    if max_rest_s > 0 and not rest_trials:
        raise ValueError("rest segments requested but no rest trials given")

    fs = reference.sample_rate_hz
    rng = np.random.default_rng(rng_seed)
    if rest_trials:
        order = rng.permutation(len(rest_trials))
        pool = np.concatenate([rest_trials[i].samples for i in order], axis=0)
    else:
        pool = np.empty((0, reference.n_channels))
    cursor = 0

    pieces: list[np.ndarray] = []
    markers: list[Marker] = []
    position = 0

    def append(block: np.ndarray, label: str) -> None:
        nonlocal position
        if block.shape[0] == 0:
            return
        pieces.append(block)
        markers.append(Marker(position, block.shape[0], label))
        position += block.shape[0]

    def draw_rest() -> np.ndarray:
        nonlocal cursor
        n_rest = int(round(rng.uniform(min_rest_s, max_rest_s) * fs))
        if n_rest == 0:
            return pool[:0]
        idx = (cursor + np.arange(n_rest)) % pool.shape[0]
        cursor = (cursor + n_rest) % pool.shape[0]
        return pool[idx]

    if rng.random() < 0.5:
        append(draw_rest(), REST)
    for k, trial in enumerate(mi_trials):
        if k > 0:
            append(draw_rest(), REST)
        append(trial.samples, MI_TASK)

    return Recording(
        sample_rate_hz=fs,
        channels=reference.channels,
        samples=np.concatenate(pieces, axis=0),
        topology=reference.topology,
        markers=tuple(markers),
    )


def segment_truth(rec: Recording, segment_len: int, hop: int, overlap_rule: float = 0.5,
                  offset: int = 0) -> pd.DataFrame:
    """
    Ground-truth label per segment.

    Segment i covers samples [offset + i*hop, offset + i*hop + segment_len);
    it is mi_task iff more than `overlap_rule` of its samples lie inside
    mi_task markers.

    Returns:
        DataFrame with columns segment_index, start_sample, label
    """
    if segment_len < 1 or hop < 1:
        raise ValueError(f"segment_len and hop must be >= 1, got {segment_len}, {hop}")
    if offset < 0:
        raise ValueError(f"offset must be >= 0, got {offset}")
    if offset + segment_len > rec.n_samples:
        raise ValueError(
            f"segment_len {segment_len} (offset {offset}) exceeds {rec.n_samples} samples"
        )

    mask = np.zeros(rec.n_samples, dtype=np.int64)
    for marker in rec.markers:
        if marker.label == MI_TASK:
            mask[marker.onset_sample:marker.end_sample] = 1
    cumulative = np.concatenate([[0], np.cumsum(mask)])

    n_segments = (rec.n_samples - offset - segment_len) // hop + 1
    starts = offset + np.arange(n_segments) * hop
    fraction = (cumulative[starts + segment_len] - cumulative[starts]) / segment_len
    return pd.DataFrame({
        'segment_index': np.arange(n_segments),
        'start_sample': starts,
        'label': np.where(fraction > overlap_rule, MI_TASK, REST),
    })
