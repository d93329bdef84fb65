"""
Model bundle: everything `detect` needs to label a raw recording.

A bundle is a directory:
    bundle.json       config echo, preprocessing state, codebook, S_th
    ed_<j>_<d>.f32    weights of the ED for channel j, scale d (PARAM_ORDER, float32)

`train` writes a bundle with "s_th": null; `tune` rewrites bundle.json with
the chosen threshold. Loading re-validates every component.
"""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from checkpoint import atomic_write_bytes, atomic_write_text
from config import PipelineConfig, config_from_dict
from predictor import EDModel, TrainConfig, bank_pairs
from preprocess import FEATURES_TIME, BandpassSpec, CwtSpec, PcaModel, preprocess_recording
from quantizer import Codebook
from signal_io import Recording

BUNDLE_FILE = "bundle.json"
BUNDLE_VERSION = 1


def weight_file_name(pair: tuple[int, int]) -> str:
    return f"ed_{pair[0]}_{pair[1]}.f32"


@dataclass
class ModelBundle:
    config: PipelineConfig
    pca: PcaModel
    cwt: CwtSpec
    codebook: Codebook
    models: list[EDModel]
    s_th: float | None = None

    @property
    def m(self) -> int:
        return self.codebook.shape[0]

    @property
    def q(self) -> int:
        return self.codebook.shape[1]

    @property
    def v(self) -> int:
        return self.codebook.v

    @property
    def n_h(self) -> int:
        return self.models[0].n_h

    @property
    def l_i(self) -> int:
        return self.models[0].l_i

    @property
    def l_o(self) -> int:
        return self.models[0].l_o

    @property
    def bandpass(self) -> BandpassSpec:
        return self.config.bandpass

    @property
    def train_config(self) -> TrainConfig:
        return self.config.train

    def validate(self) -> None:
        if self.pca.n_components != self.m:
            raise ValueError(f"codebook covers {self.m} channels but PCA keeps {self.pca.n_components}")
        expected_q = 1 if self.config.features == FEATURES_TIME else self.cwt.q
        if self.q != expected_q:
            raise ValueError(f"codebook covers {self.q} scales, expected {expected_q}")
        pairs = bank_pairs(self.m, self.q)
        if len(self.models) != len(pairs):
            raise ValueError(f"bundle holds {len(self.models)} EDs, expected m' x q = {len(pairs)}")
        for pair, model in zip(pairs, self.models):
            if model.pair != pair:
                raise ValueError(f"ED for pair {model.pair} found where {pair} was expected")
            if (model.v, model.l_i, model.l_o) != (self.v, self.config.l_i, self.config.l_o):
                raise ValueError(f"ED {pair} shape (v, l_i, l_o) does not match the bundle")
            if model.n_h != self.config.train.n_h:
                raise ValueError(f"ED {pair} has n_h={model.n_h}, config says {self.config.train.n_h}")
        if self.s_th is not None and not 0 <= self.s_th <= 1:
            raise ValueError(f"S_th must be in [0, 1], got {self.s_th}")

    def with_threshold(self, s_th: float) -> "ModelBundle":
        bundle = replace(self, s_th=float(s_th))
        bundle.validate()
        return bundle

    def preprocess(self, rec: Recording) -> np.ndarray:
        """Raw recording -> [time x m' x q] with the bundle's fitted preprocessing."""
        if rec.sample_rate_hz != self.config.sample_rate_hz:
            raise ValueError(f"recording sampled at {rec.sample_rate_hz} Hz, bundle expects {self.config.sample_rate_hz} Hz")
        return preprocess_recording(rec, self.bandpass, self.pca, self.cwt, self.config.features)

    def to_dict(self) -> dict:
        return {
            'version': BUNDLE_VERSION,
            'config': self.config.to_dict(),
            'pca': self.pca.to_dict(),
            'cwt': self.cwt.to_dict(),
            'codebook': self.codebook.to_dict(),
            's_th': self.s_th,
            'm': self.m,
            'q': self.q,
            'v': self.v,
            'n_h': self.n_h,
            'l_i': self.l_i,
            'l_o': self.l_o,
            'weights': [weight_file_name(model.pair) for model in self.models],
        }


# ============ Save / Load ============

def save_bundle(bundle: ModelBundle, directory: str | Path) -> Path:
    bundle.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for model in bundle.models:
        atomic_write_bytes(directory / weight_file_name(model.pair), model.to_bytes())
    # bundle.json last: a directory without it is an unfinished bundle
    atomic_write_text(directory / BUNDLE_FILE, json.dumps(bundle.to_dict(), indent=2) + '\n')
    return directory


def load_bundle(directory: str | Path) -> ModelBundle:
    directory = Path(directory)
    meta_path = directory / BUNDLE_FILE
    if not meta_path.exists():
        raise FileNotFoundError(f"no model bundle at {directory} ({BUNDLE_FILE} missing)")
    meta = json.loads(meta_path.read_text(encoding='utf-8'))
    if meta.get('version') != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {meta.get('version')!r}")

    config = config_from_dict(meta['config'])
    pca = PcaModel.from_dict(meta['pca'])
    cwt = CwtSpec.from_dict(meta['cwt'])
    codebook = Codebook.from_dict(meta['codebook'])
    m, q, v, n_h, l_i, l_o = (int(meta[key]) for key in ('m', 'q', 'v', 'n_h', 'l_i', 'l_o'))
    if codebook.shape != (m, q) or codebook.v != v:
        raise ValueError(f"codebook {codebook.shape}/v={codebook.v} disagrees with m={m}, q={q}, v={v}")

    models = []
    for pair in bank_pairs(m, q):
        path = directory / weight_file_name(pair)
        if not path.exists():
            raise FileNotFoundError(f"missing weight file {path}")
        models.append(EDModel.from_bytes(path.read_bytes(), v=v, n_h=n_h, l_i=l_i, l_o=l_o, pair=pair))

    bundle = ModelBundle(config=config, pca=pca, cwt=cwt, codebook=codebook, models=models,
                         s_th=None if meta['s_th'] is None else float(meta['s_th']))
    bundle.validate()
    return bundle
