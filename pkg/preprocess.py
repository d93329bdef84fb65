"""
Preprocessing chain: small Laplacian -> causal bandpass -> PCA -> Morlet CWT -> windows.

Every stage keeps the sample count of its input; latency bookkeeping
lives in the detector.

Usage:
    from preprocess import BandpassSpec, CwtSpec, pca_fit, preprocess_recording, windows_from_series

    pca = pca_fit(filtered_mi_trials, retention=0.70)
    series = preprocess_recording(rec, BandpassSpec(), pca, CwtSpec())   # [time x m' x q]
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from signal_io import Recording

FEATURES_TIME_SCALE = "time_scale"
FEATURES_TIME = "time"
FEATURE_MODES = (FEATURES_TIME_SCALE, FEATURES_TIME)


# ============ Spatial Filter ============

def laplacian_filter(rec: Recording) -> Recording:
    """Subtract the mean of each channel's neighbours; channels without neighbours pass through."""
    index = {name: i for i, name in enumerate(rec.channels)}
    operator = np.eye(rec.n_channels)
    for name, neighbors in rec.topology.items():
        if neighbors:
            row = index[name]
            for neighbor in neighbors:
                operator[row, index[neighbor]] -= 1.0 / len(neighbors)
    return rec.replace_samples(rec.samples @ operator.T)


# ============ Bandpass ============

@dataclass
class BandpassSpec:
    """Butterworth bandpass realised as a biquad (second-order section) cascade."""
    low_hz: float = 6.0
    high_hz: float = 13.0
    order: int = 4

    def validate(self, sample_rate_hz: float) -> None:
        if not 0 < self.low_hz < self.high_hz < sample_rate_hz / 2:
            raise ValueError(
                f"bandpass needs 0 < low_hz < high_hz < {sample_rate_hz / 2}, "
                f"got low_hz={self.low_hz}, high_hz={self.high_hz}"
            )
        if self.order < 1:
            raise ValueError(f"bandpass order must be >= 1, got {self.order}")

    def to_dict(self) -> dict:
        return {'low_hz': self.low_hz, 'high_hz': self.high_hz, 'order': self.order}


def butterworth_magnitude(freqs_hz: np.ndarray, spec: BandpassSpec, sample_rate_hz: float) -> np.ndarray:
    """
    Closed-form magnitude of the digital Butterworth bandpass.

    Analog prototype |H| = 1 / sqrt(1 + x^(2N)), x = (w^2 - w0^2) / (w * bw),
    evaluated at the bilinear-prewarped frequency w = 2 fs tan(pi f / fs).
    """
    fs = sample_rate_hz

    def warp(f):
        return 2.0 * fs * np.tan(np.pi * np.asarray(f, dtype=np.float64) / fs)

    w_low, w_high = warp(spec.low_hz), warp(spec.high_hz)
    w0_sq = w_low * w_high
    bw = w_high - w_low
    w = warp(freqs_hz)
    with np.errstate(divide='ignore', invalid='ignore'):
        x = (w ** 2 - w0_sq) / (w * bw)
        magnitude = 1.0 / np.sqrt(1.0 + x ** (2 * spec.order))
    return np.where(w == 0, 0.0, magnitude)


def design_bandpass(spec: BandpassSpec, sample_rate_hz: float) -> np.ndarray:
    """
    Second-order sections of the bandpass.

    Raises:
        ValueError: invalid band, or a section with poles on/outside the unit circle
    """
    spec.validate(sample_rate_hz)
    sos = signal.butter(spec.order, [spec.low_hz, spec.high_hz], btype='bandpass',
                        output='sos', fs=sample_rate_hz)
    for section in sos:
        poles = np.roots(section[3:])
        if np.any(np.abs(poles) >= 1.0):
            raise ValueError(f"unstable bandpass section (pole radius {np.abs(poles).max():.6f})")
    return sos


def bandpass_filter(rec: Recording, spec: BandpassSpec) -> Recording:
    """Single forward pass with zero initial conditions, per channel."""
    sos = design_bandpass(spec, rec.sample_rate_hz)
    return rec.replace_samples(signal.sosfilt(sos, rec.samples, axis=0))


# ============ PCA ============

@dataclass
class PcaModel:
    channels: tuple[str, ...]
    mean: np.ndarray                 # [n_channels]
    components: np.ndarray           # [n_channels x m']
    eigenvalues: np.ndarray          # all n_channels, descending
    explained_fraction: float
    retention: float

    @property
    def n_components(self) -> int:
        return self.components.shape[1]

    def to_dict(self) -> dict:
        return {
            'channels': list(self.channels),
            'mean': self.mean.tolist(),
            'components': self.components.tolist(),
            'eigenvalues': self.eigenvalues.tolist(),
            'explained_fraction': self.explained_fraction,
            'retention': self.retention,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PcaModel":
        model = cls(
            channels=tuple(data['channels']),
            mean=np.asarray(data['mean'], dtype=np.float64),
            components=np.asarray(data['components'], dtype=np.float64).reshape(len(data['channels']), -1),
            eigenvalues=np.asarray(data['eigenvalues'], dtype=np.float64),
            explained_fraction=float(data['explained_fraction']),
            retention=float(data['retention']),
        )
        gram = model.components.T @ model.components
        if not np.allclose(gram, np.eye(model.n_components), atol=1e-9):
            raise ValueError("PCA components are not orthonormal")
        if model.explained_fraction < model.retention - 1e-12:
            raise ValueError("PCA explained fraction is below its retention target")
        return model


def pca_fit(mi_trials: list[Recording], retention: float = 0.70) -> PcaModel:
    """
    Principal axes of the channel covariance of all MI samples, concatenated in time.

    m' is the smallest k whose cumulative explained variance reaches
    `retention`. Each component is signed so its largest-magnitude entry is
    positive.
    """
    if not mi_trials:
        raise ValueError("pca_fit needs at least one trial")
    if not 0 < retention <= 1:
        raise ValueError(f"retention must be in (0, 1], got {retention}")
    channels = mi_trials[0].channels
    for trial in mi_trials:
        if trial.channels != channels:
            raise ValueError("pca_fit trials have different channel sets")

    data = np.concatenate([trial.samples for trial in mi_trials], axis=0)
    n_samples, n_channels = data.shape
    if n_samples <= n_channels:
        raise ValueError(f"pca_fit needs more samples than channels ({n_samples} <= {n_channels})")

    mean = data.mean(axis=0)
    centered = data - mean
    covariance = centered.T @ centered / (n_samples - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    eigenvectors = eigenvectors[:, order]

    total = eigenvalues.sum()
    if total <= 0:
        raise ValueError("MI trials have zero variance on every channel")
    cumulative = np.cumsum(eigenvalues) / total
    n_components = int(np.searchsorted(cumulative, retention - 1e-12) + 1)
    n_components = min(n_components, n_channels)

    components = eigenvectors[:, :n_components].copy()
    for k in range(n_components):
        pivot = np.argmax(np.abs(components[:, k]))
        if components[pivot, k] < 0:
            components[:, k] = -components[:, k]

    return PcaModel(
        channels=channels,
        mean=mean,
        components=components,
        eigenvalues=eigenvalues,
        explained_fraction=float(cumulative[n_components - 1]),
        retention=retention,
    )


def pca_project(rec: Recording, model: PcaModel) -> Recording:
    """Rows x -> components^T (x - mean); output channels pc0..pc{m'-1}."""
    if rec.channels != model.channels:
        raise ValueError(f"channel mismatch: recording {rec.channels} vs PCA model {model.channels}")
    projected = (rec.samples - model.mean) @ model.components
    names = tuple(f"pc{k}" for k in range(model.n_components))
    return rec.replace_samples(projected, channels=names, keep_topology=False)


# ============ Continuous Wavelet Transform ============

@dataclass
class CwtSpec:
    q: int = 6
    omega0: float = 6.0
    low_hz: float = 6.0
    high_hz: float = 13.0

    def validate(self) -> None:
        if self.q < 1:
            raise ValueError(f"cwt q must be >= 1, got {self.q}")
        if not 0 < self.low_hz <= self.high_hz:
            raise ValueError(f"cwt band invalid: [{self.low_hz}, {self.high_hz}]")

    @property
    def center_freqs_hz(self) -> np.ndarray:
        return np.geomspace(self.low_hz, self.high_hz, self.q)

    def to_dict(self) -> dict:
        return {'q': self.q, 'omega0': self.omega0, 'low_hz': self.low_hz, 'high_hz': self.high_hz}

    @classmethod
    def from_dict(cls, data: dict) -> "CwtSpec":
        spec = cls(**data)
        spec.validate()
        return spec


def morlet_kernel(center_hz: float, sample_rate_hz: float, omega0: float = 6.0) -> np.ndarray:
    """L1-normalised complex Morlet whose centre frequency is `center_hz`, truncated at 4 sigma."""
    scale_s = omega0 / (2 * np.pi * center_hz)
    half = int(np.ceil(4 * scale_s * sample_rate_hz))
    t = np.arange(-half, half + 1) / sample_rate_hz
    kernel = np.exp(1j * omega0 * t / scale_s) * np.exp(-0.5 * (t / scale_s) ** 2)
    return kernel / np.sum(np.abs(kernel))


def cwt_decompose(rec: Recording, spec: CwtSpec) -> np.ndarray:
    """
    Single-scale slices of the CWT: f_d(t) = Re{(x * conj(psi_d))(t)}.

    Returns:
        array [time x n_channels x q]
    """
    spec.validate()
    out = np.empty((rec.n_samples, rec.n_channels, spec.q))
    for d, center in enumerate(spec.center_freqs_hz):
        kernel = morlet_kernel(center, rec.sample_rate_hz, spec.omega0)
        # the kernel is Hermitian-symmetric, so correlation with conj(psi) is convolution with psi
        coeffs = signal.fftconvolve(rec.samples, kernel[:, None], mode='same', axes=0)
        out[:, :, d] = coeffs.real
    return out


# ============ Full Chain ============

def spatial_and_band(rec: Recording, bandpass: BandpassSpec) -> Recording:
    return bandpass_filter(laplacian_filter(rec), bandpass)


def preprocess_recording(rec: Recording, bandpass: BandpassSpec, pca: PcaModel, cwt: CwtSpec,
                         features: str = FEATURES_TIME_SCALE) -> np.ndarray:
    """Laplacian -> bandpass -> PCA -> CWT; returns [time x m' x q] (q = 1 for time-only features)."""
    projected = pca_project(spatial_and_band(rec, bandpass), pca)
    if features == FEATURES_TIME:
        return projected.samples[:, :, None].copy()
    if features != FEATURES_TIME_SCALE:
        raise ValueError(f"unknown feature mode {features!r}, expected one of {FEATURE_MODES}")
    return cwt_decompose(projected, cwt)


# ============ Windowing ============

@dataclass
class ScaleTensor:
    data: np.ndarray                       # [N x window_len x m' x q]
    origins: np.ndarray                    # first sample of each window in its source series
    groups: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"ScaleTensor data must be 4-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("ScaleTensor contains non-finite values")
        if self.groups.size == 0:
            self.groups = np.zeros(self.data.shape[0], dtype=np.int64)

    @property
    def n_windows(self) -> int:
        return self.data.shape[0]

    @property
    def window_len(self) -> int:
        return self.data.shape[1]


def make_windows(series: np.ndarray, l_i: int, l_o: int, hop: int) -> tuple[ScaleTensor, ScaleTensor]:
    """
    Window k: inputs [k*hop, k*hop + l_i), targets [k*hop + l_i, k*hop + l_i + l_o).
    N = floor((time - l_i - l_o) / hop) + 1.
    """
    if series.ndim != 3:
        raise ValueError(f"series must be [time x m' x q], got shape {series.shape}")
    if min(l_i, l_o, hop) < 1:
        raise ValueError(f"l_i, l_o and hop must be >= 1, got {l_i}, {l_o}, {hop}")
    n_time = series.shape[0]
    if n_time < l_i + l_o:
        raise ValueError(f"series of {n_time} samples is shorter than l_i + l_o = {l_i + l_o}")

    n_windows = (n_time - l_i - l_o) // hop + 1
    origins = np.arange(n_windows) * hop
    input_idx = origins[:, None] + np.arange(l_i)[None, :]
    target_idx = origins[:, None] + l_i + np.arange(l_o)[None, :]
    return (ScaleTensor(series[input_idx], origins),
            ScaleTensor(series[target_idx], origins + l_i))


def windows_from_series(series_list: list[np.ndarray], l_i: int, l_o: int,
                        hop: int) -> tuple[ScaleTensor, ScaleTensor]:
    """Windows of every trial concatenated; `groups` records the trial each window came from."""
    inputs, targets, origins, groups = [], [], [], []
    for trial_idx, series in enumerate(series_list):
        if series.shape[0] < l_i + l_o:
            continue
        x, y = make_windows(series, l_i, l_o, hop)
        inputs.append(x.data)
        targets.append(y.data)
        origins.append(x.origins)
        groups.append(np.full(x.n_windows, trial_idx, dtype=np.int64))
    if not inputs:
        raise ValueError(f"no trial is long enough for l_i + l_o = {l_i + l_o} samples")
    groups = np.concatenate(groups)
    origins = np.concatenate(origins)
    return (ScaleTensor(np.concatenate(inputs), origins, groups),
            ScaleTensor(np.concatenate(targets), origins + l_i, groups))
