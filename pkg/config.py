"""
Pipeline configuration: a YAML file mapped onto nested dataclasses.

Every key is optional; an empty file gives the defaults below. Unknown keys
are rejected with their dotted path. Segment lengths are given in seconds
and converted to samples here, once, so that no other module deals in
seconds.

Usage:
    from config import parse_config

    cfg = parse_config("configs/default.yaml")
    cfg.l_i, cfg.l_o, cfg.hop          # samples
    cfg = cfg.with_seed(7)             # --seed override
"""

import copy
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from detector import TUNING_MODES, TUNING_PERCENTILE, DetectorConfig
from predictor import TrainConfig
from preprocess import FEATURE_MODES, FEATURES_TIME_SCALE, BandpassSpec, CwtSpec
from signal_io import SynthConfig

# YAML spellings accepted in place of field names, per section
ALIASES = {
    'train': {'lambda': 'l1_lambda', 'seed': 'rng_seed'},
    'synth': {'seed': 'rng_seed'},
}

# nearest-sample rounding may move a length by at most this fraction
ROUNDING_TOLERANCE = 0.01


class ConfigError(ValueError):
    """Invalid configuration; `path` is the dotted key at fault."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path} {message}")


# ============ Sections ============

@dataclass
class DetectorSettings:
    n_s: int = 2
    tuning_mode: str = TUNING_PERCENTILE
    percentile_alpha: float = 0.05
    folds: int = 5
    tuning_epochs: int | None = None     # None: fold banks train for train.epochs


@dataclass
class SplitSettings:
    train_fraction: float = 0.70         # MI trials used for training
    val_rest_fraction: float = 0.5       # rest trials held for F1 tuning; the others feed the stream
    seed: int = 0


@dataclass
class StreamSettings:
    min_rest_s: float = 2.0
    max_rest_s: float = 6.0
    seed: int = 1


@dataclass
class SweepSettings:
    n_h: list[int] = field(default_factory=list)
    l_o_s: list[float] = field(default_factory=list)


@dataclass
class PipelineConfig:
    sample_rate_hz: float = 100.0
    bandpass: BandpassSpec = field(default_factory=BandpassSpec)
    pca_retention: float = 0.70
    q: int = 6
    omega0: float = 6.0
    v: int = 64
    features: str = FEATURES_TIME_SCALE
    l_i_s: float = 0.5
    l_o_s: float = 0.5
    hop_s: float | None = None           # None: hop = l_o
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitSettings = field(default_factory=SplitSettings)
    stream: StreamSettings = field(default_factory=StreamSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)

    # samples, filled by resolve()
    l_i: int = field(init=False, default=0)
    l_o: int = field(init=False, default=0)
    hop: int = field(init=False, default=0)

    def resolve(self) -> "PipelineConfig":
        """Validate every section and derive sample counts. Returns self."""
        _validate(self)
        self.l_i = seconds_to_samples(self.l_i_s, self.sample_rate_hz, 'l_i_s')
        self.l_o = seconds_to_samples(self.l_o_s, self.sample_rate_hz, 'l_o_s')
        hop_s = self.l_o_s if self.hop_s is None else self.hop_s
        self.hop = seconds_to_samples(hop_s, self.sample_rate_hz, 'hop_s')
        return self

    def cwt_spec(self) -> CwtSpec:
        return CwtSpec(q=self.q, omega0=self.omega0, low_hz=self.bandpass.low_hz, high_hz=self.bandpass.high_hz)

    def detector_config(self, s_th: float | None) -> DetectorConfig:
        return DetectorConfig(s_th=s_th, l_i=self.l_i, l_o=self.l_o, hop=self.hop, n_s=self.detector.n_s)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with every seed in the tree replaced by `seed`."""
        cfg = copy.deepcopy(self)
        cfg.train.rng_seed = seed
        cfg.synth.rng_seed = seed
        cfg.split.seed = seed
        cfg.stream.seed = seed
        return cfg.resolve()

    def with_overrides(self, n_h: int | None = None, l_o_s: float | None = None) -> "PipelineConfig":
        """Copy for one sweep point; hop follows l_o when it was not set explicitly."""
        cfg = copy.deepcopy(self)
        if n_h is not None:
            cfg.train = replace(cfg.train, n_h=n_h)
        if l_o_s is not None:
            cfg.l_o_s = l_o_s
        return cfg.resolve()

    def to_dict(self) -> dict:
        return {f.name: _plain(getattr(self, f.name)) for f in fields(self) if f.init}


def _plain(value):
    if is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value) if f.init}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


# ============ Conversion ============

def seconds_to_samples(seconds: float, sample_rate_hz: float, path: str) -> int:
    exact = seconds * sample_rate_hz
    samples = int(round(exact))
    if samples < 1:
        raise ConfigError(path, f"must span at least one sample, got {seconds} s at {sample_rate_hz} Hz")
    if abs(samples - exact) > ROUNDING_TOLERANCE * exact:
        raise ConfigError(path, f"is not a whole number of samples ({exact:.3f} at {sample_rate_hz} Hz)")
    return samples


# ============ Parsing ============

def _coerce(value, hint, path: str):
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return None
        hint = next(option for option in options if option is not type(None))
    origin = typing.get_origin(hint)
    if origin in (list, tuple):
        if not isinstance(value, list):
            raise ConfigError(path, f"must be a list, got {value!r}")
        (item_hint, *_) = typing.get_args(hint)
        return [_coerce(item, item_hint, f"{path}[{i}]") for i, item in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"must be a string, got {value!r}")
        return value
    raise ConfigError(path, f"has unsupported type {hint}")


def _build(cls, data, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(path or '<root>', f"must be a mapping, got {type(data).__name__}")
    aliases = ALIASES.get(path, {})
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        name = aliases.get(key, key)
        key_path = f"{path}.{key}" if path else str(key)
        if name not in known:
            raise ConfigError(key_path, "is not a known setting")
        if name in kwargs:
            raise ConfigError(key_path, "is given twice")
        hint = hints[name]
        if is_dataclass(hint):
            kwargs[name] = _build(hint, value, key_path)
        else:
            kwargs[name] = _coerce(value, hint, key_path)
    return cls(**kwargs)


def _section_check(section, path: str) -> None:
    try:
        section.validate()
    except ValueError as e:
        # section validators already prefix their messages with the dotted key
        key, _, rest = str(e).partition(' ')
        if key == path or key.startswith(f"{path}."):
            raise ConfigError(key, rest) from e
        raise ConfigError(path, str(e)) from e


def _validate(cfg: PipelineConfig) -> None:
    if not cfg.sample_rate_hz > 0:
        raise ConfigError('sample_rate_hz', f"must be positive, got {cfg.sample_rate_hz}")
    bp = cfg.bandpass
    if not bp.low_hz > 0:
        raise ConfigError('bandpass.low_hz', f"must be positive, got {bp.low_hz}")
    if not bp.low_hz < bp.high_hz:
        raise ConfigError('bandpass.low_hz', "must be < high_hz")
    if not bp.high_hz < cfg.sample_rate_hz / 2:
        raise ConfigError('bandpass.high_hz', f"must be below Nyquist ({cfg.sample_rate_hz / 2} Hz)")
    if bp.order < 1:
        raise ConfigError('bandpass.order', f"must be >= 1, got {bp.order}")
    if not 0 < cfg.pca_retention <= 1:
        raise ConfigError('pca_retention', f"must be in (0, 1], got {cfg.pca_retention}")
    if cfg.q < 1:
        raise ConfigError('q', f"must be >= 1, got {cfg.q}")
    if not cfg.omega0 > 0:
        raise ConfigError('omega0', f"must be positive, got {cfg.omega0}")
    if cfg.v < 2:
        raise ConfigError('v', f"must be >= 2, got {cfg.v}")
    if cfg.features not in FEATURE_MODES:
        raise ConfigError('features', f"must be one of {FEATURE_MODES}, got {cfg.features!r}")

    _section_check(cfg.train, 'train')
    if cfg.synth.sample_rate_hz != cfg.sample_rate_hz:
        raise ConfigError('synth.sample_rate_hz', f"must equal sample_rate_hz ({cfg.sample_rate_hz})")
    _section_check(cfg.synth, 'synth')

    det = cfg.detector
    if det.n_s < 0 or det.n_s % 2:
        raise ConfigError('detector.n_s', f"must be even and >= 0, got {det.n_s}")
    if det.tuning_mode not in TUNING_MODES:
        raise ConfigError('detector.tuning_mode', f"must be one of {TUNING_MODES}, got {det.tuning_mode!r}")
    if not 0 <= det.percentile_alpha <= 1:
        raise ConfigError('detector.percentile_alpha', f"must be in [0, 1], got {det.percentile_alpha}")
    if det.folds < 2:
        raise ConfigError('detector.folds', f"must be >= 2, got {det.folds}")
    if det.tuning_epochs is not None and det.tuning_epochs < 1:
        raise ConfigError('detector.tuning_epochs', f"must be >= 1, got {det.tuning_epochs}")

    if not 0 < cfg.split.train_fraction < 1:
        raise ConfigError('split.train_fraction', f"must be in (0, 1), got {cfg.split.train_fraction}")
    if not 0 <= cfg.split.val_rest_fraction < 1:
        raise ConfigError('split.val_rest_fraction', f"must be in [0, 1), got {cfg.split.val_rest_fraction}")
    if cfg.stream.min_rest_s < 0:
        raise ConfigError('stream.min_rest_s', f"must be >= 0, got {cfg.stream.min_rest_s}")
    if cfg.stream.max_rest_s < cfg.stream.min_rest_s:
        raise ConfigError('stream.max_rest_s', "must be >= min_rest_s")

    for i, n_h in enumerate(cfg.sweep.n_h):
        if n_h < 1:
            raise ConfigError(f'sweep.n_h[{i}]', f"must be >= 1, got {n_h}")
    for i, l_o_s in enumerate(cfg.sweep.l_o_s):
        seconds_to_samples(l_o_s, cfg.sample_rate_hz, f'sweep.l_o_s[{i}]')


def config_from_dict(data: dict | None) -> PipelineConfig:
    """Build and resolve a PipelineConfig from already parsed YAML."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError('<root>', f"must be a mapping, got {type(data).__name__}")
    data = dict(data)
    # synth inherits the top-level sample rate unless it sets its own
    synth = data.get('synth')
    if synth is None or (isinstance(synth, dict) and 'sample_rate_hz' not in synth):
        rate = data.get('sample_rate_hz', PipelineConfig.sample_rate_hz)
        data['synth'] = {**(synth or {}), 'sample_rate_hz': rate}
    return _build(PipelineConfig, data, '').resolve()


def parse_config(path: str | Path | None) -> PipelineConfig:
    """Read a YAML config; None gives the defaults."""
    if path is None:
        return config_from_dict({})
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding='utf-8'))
    except yaml.YAMLError as e:
        raise ConfigError(str(path), f"is not valid YAML: {e}") from e
    return config_from_dict(data)
