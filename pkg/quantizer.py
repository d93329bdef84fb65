"""
Uniform per-(channel, scale) quantizer with one-hot encoding.

Levels are floor((x - lo) / (hi - lo) * v), clamped to [0, v-1]; values
outside the training range land on the end levels.
"""

from dataclasses import dataclass

import numpy as np

from preprocess import ScaleTensor


@dataclass(frozen=True)
class Codebook:
    lo: np.ndarray     # [m' x q]
    hi: np.ndarray     # [m' x q]
    v: int = 64

    def __post_init__(self):
        lo = np.array(self.lo, dtype=np.float64)
        hi = np.array(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 2:
            raise ValueError(f"codebook lo/hi must be matching [m' x q] arrays, got {lo.shape}, {hi.shape}")
        if self.v < 2:
            raise ValueError(f"codebook needs v >= 2 levels, got {self.v}")
        bad = np.argwhere(~(lo < hi))
        if bad.size:
            j, d = bad[0]
            raise ValueError(f"codebook pair (channel {j}, scale {d}) has lo >= hi")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, 'lo', lo)
        object.__setattr__(self, 'hi', hi)

    @property
    def shape(self) -> tuple[int, int]:
        return self.lo.shape

    def to_dict(self) -> dict:
        return {'v': self.v, 'lo': self.lo.tolist(), 'hi': self.hi.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Codebook":
        return cls(lo=np.asarray(data['lo']), hi=np.asarray(data['hi']), v=int(data['v']))


def fit_codebook(train: ScaleTensor | np.ndarray, v: int = 64) -> Codebook:
    """lo/hi = min/max of every (channel, scale) pair over all training values."""
    data = train.data if isinstance(train, ScaleTensor) else np.asarray(train)
    if data.size == 0:
        raise ValueError("cannot fit a codebook on an empty tensor")
    flat = data.reshape(-1, *data.shape[-2:])
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    constant = np.argwhere(lo == hi)
    if constant.size:
        j, d = constant[0]
        raise ValueError(f"constant series for pair (channel {j}, scale {d}): cannot quantize")
    return Codebook(lo=lo, hi=hi, v=v)


def quantize(x: float, pair: tuple[int, int], cb: Codebook) -> int:
    if not np.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x}")
    j, d = pair
    lo, hi = cb.lo[j, d], cb.hi[j, d]
    level = int(np.floor((x - lo) / (hi - lo) * cb.v))
    return min(max(level, 0), cb.v - 1)


def dequantize(level: int, pair: tuple[int, int], cb: Codebook) -> float:
    """Bin centre of `level`."""
    if not 0 <= level < cb.v:
        raise ValueError(f"level {level} outside [0, {cb.v - 1}]")
    j, d = pair
    lo, hi = cb.lo[j, d], cb.hi[j, d]
    return float(lo + (level + 0.5) * (hi - lo) / cb.v)


def one_hot(level: int, v: int) -> np.ndarray:
    if not 0 <= level < v:
        raise ValueError(f"level {level} outside [0, {v - 1}]")
    vec = np.zeros(v)
    vec[level] = 1.0
    return vec


# ============ Vectorised Forms ============

def quantize_array(series: np.ndarray, cb: Codebook) -> np.ndarray:
    """Levels for an array whose last two axes are [m' x q]."""
    series = np.asarray(series, dtype=np.float64)
    if series.shape[-2:] != cb.shape:
        raise ValueError(f"series pairs {series.shape[-2:]} do not match codebook {cb.shape}")
    if not np.all(np.isfinite(series)):
        raise ValueError("cannot quantize non-finite values")
    levels = np.floor((series - cb.lo) / (cb.hi - cb.lo) * cb.v)
    return np.clip(levels, 0, cb.v - 1).astype(np.int64)


def dequantize_array(levels: np.ndarray, cb: Codebook) -> np.ndarray:
    levels = np.asarray(levels)
    if levels.shape[-2:] != cb.shape:
        raise ValueError(f"level pairs {levels.shape[-2:]} do not match codebook {cb.shape}")
    if levels.size and (levels.min() < 0 or levels.max() >= cb.v):
        raise ValueError(f"levels outside [0, {cb.v - 1}]")
    return cb.lo + (levels + 0.5) * (cb.hi - cb.lo) / cb.v


def one_hot_array(levels: np.ndarray, v: int) -> np.ndarray:
    """Append a one-hot axis of length v."""
    levels = np.asarray(levels)
    if levels.size and (levels.min() < 0 or levels.max() >= v):
        raise ValueError(f"levels outside [0, {v - 1}]")
    return np.eye(v)[levels]
