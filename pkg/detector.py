"""
Self-paced MI onset detector built on the ED bank.

For every segment [t, t + l_o) of a preprocessed stream the bank predicts
the segment from the l_i samples before t; once the segment has arrived,
the similarity S between prediction and arrival decides mi_task
(S >= S_th) or rest. A windowed majority vote then smooths the labels.

Usage:
    from detector import DetectorConfig, detect_stream, write_decisions

    decisions = detect_stream(series, bank, codebook, DetectorConfig(s_th=0.62, l_i=50, l_o=50))
    write_decisions(decisions, "runs/default/decisions.csv")
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
from sklearn.model_selection import GroupKFold, KFold

from checkpoint import atomic_write_text
from metrics import Confusion, compute_metrics
from predictor import EDModel, TrainConfig, predict_batch, train_bank
from quantizer import Codebook, dequantize_array, one_hot_array, quantize_array
from signal_io import MI_TASK, REST

TUNING_PERCENTILE = "percentile"
TUNING_F1 = "f1"
TUNING_MODES = (TUNING_PERCENTILE, TUNING_F1)

DECISION_COLUMNS = [
    'segment_index', 'start_sample', 'S', 'raw_label', 'corrected_label', 'decision_available_at_sample',
]


# ============ Types ============

@dataclass
class DetectorConfig:
    s_th: float | None
    l_i: int
    l_o: int
    hop: int | None = None       # defaults to l_o
    n_s: int = 2

    def __post_init__(self):
        if self.hop is None:
            self.hop = self.l_o

    def validate(self) -> None:
        if self.s_th is not None and not 0 <= self.s_th <= 1:
            raise ValueError(f"S_th must be in [0, 1], got {self.s_th}")
        if min(self.l_i, self.l_o, self.hop) < 1:
            raise ValueError(f"l_i, l_o and hop must be >= 1, got {self.l_i}, {self.l_o}, {self.hop}")
        if self.n_s < 0 or self.n_s % 2:
            raise ValueError(f"N_s must be even and >= 0, got {self.n_s}")


@dataclass(frozen=True)
class SegmentDecision:
    segment_index: int
    start_sample: int
    similarity: float
    raw_label: str
    corrected_label: str
    raw_available_at_sample: int
    decision_available_at_sample: int


@dataclass
class ThresholdResult:
    s_th: float
    mode: str
    mi_similarities: np.ndarray
    rest_similarities: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fold_sizes: list[int] = field(default_factory=list)


# ============ Similarity ============

def _similarity_terms(predicted: np.ndarray, received: np.ndarray) -> np.ndarray:
    numerator = np.abs(predicted - received)
    denominator = np.abs(predicted) + np.abs(received)
    terms = np.ones_like(denominator)
    nonzero = denominator > 0
    terms[nonzero] = 1.0 - numerator[nonzero] / denominator[nonzero]
    return terms


def similarity(predicted: np.ndarray, received: np.ndarray) -> float:
    """
    Mean over samples and channel-scale streams of 1 - |y_hat - y| / (|y_hat| + |y|).

    A term whose both sides are zero counts as 1.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    received = np.asarray(received, dtype=np.float64)
    if predicted.shape != received.shape:
        raise ValueError(f"shape mismatch: predicted {predicted.shape} vs received {received.shape}")
    if not (np.all(np.isfinite(predicted)) and np.all(np.isfinite(received))):
        raise ValueError("similarity needs finite values")
    return float(np.mean(_similarity_terms(predicted, received)))


def predict_levels(bank: list[EDModel], codebook: Codebook, history_levels: np.ndarray) -> np.ndarray:
    """Bank prediction for histories [K x l_i x m' x q] -> levels [K x l_o x m' x q]."""
    n_segments, _, m, q = history_levels.shape
    if len(bank) != m * q:
        raise ValueError(f"bank has {len(bank)} networks but the stream has {m} x {q} pairs")
    l_o = bank[0].l_o
    predicted = np.empty((n_segments, l_o, m, q), dtype=np.int64)
    for model in bank:
        j, d = model.pair
        _, levels = predict_batch(model, one_hot_array(history_levels[:, :, j, d], codebook.v))
        predicted[:, :, j, d] = levels
    return predicted


def segment_similarities(bank: list[EDModel], codebook: Codebook, history_levels: np.ndarray,
                         received_levels: np.ndarray) -> np.ndarray:
    """S per segment, both sides taken through the codebook's bin centres."""
    if len(history_levels) == 0:
        return np.zeros(0)
    predicted = dequantize_array(predict_levels(bank, codebook, history_levels), codebook)
    received = dequantize_array(received_levels, codebook)
    terms = _similarity_terms(predicted, received)
    return terms.reshape(terms.shape[0], -1).mean(axis=1)


# ============ Error Correction ============

def error_correct(labels: list[str], n_s: int) -> list[str]:
    """
    Majority vote over {i - N_s/2, ..., i + N_s/2} of the input labels.

    Single pass, windows truncated at the ends, exact ties keep the original.
    """
    if n_s < 0 or n_s % 2:
        raise ValueError(f"N_s must be even and >= 0, got {n_s}")
    half = n_s // 2
    corrected = []
    for i, label in enumerate(labels):
        window = labels[max(0, i - half):i + half + 1]
        n_mi = sum(1 for item in window if item == MI_TASK)
        n_rest = len(window) - n_mi
        if n_mi > n_rest:
            corrected.append(MI_TASK)
        elif n_rest > n_mi:
            corrected.append(REST)
        else:
            corrected.append(label)
    return corrected


# ============ Streaming Detection ============

def detect_stream(series: np.ndarray, bank: list[EDModel], codebook: Codebook,
                  cfg: DetectorConfig) -> list[SegmentDecision]:
    """
    Label every segment [t, t + l_o), t = l_i, l_i + hop, ...

    The decision for a segment depends only on samples before t + l_o.
    """
    cfg.validate()
    if cfg.s_th is None:
        raise ValueError("threshold not tuned")
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 3:
        raise ValueError(f"stream must be [time x m' x q], got shape {series.shape}")
    n_time = series.shape[0]
    if n_time < cfg.l_i + cfg.l_o:
        raise ValueError(f"stream of {n_time} samples is shorter than l_i + l_o = {cfg.l_i + cfg.l_o}")
    for model in bank:
        if (model.l_i, model.l_o) != (cfg.l_i, cfg.l_o):
            raise ValueError(
                f"ED {model.pair} was trained for l_i={model.l_i}, l_o={model.l_o}, "
                f"detector uses l_i={cfg.l_i}, l_o={cfg.l_o}"
            )

    levels = quantize_array(series, codebook)
    starts = np.arange(cfg.l_i, n_time - cfg.l_o + 1, cfg.hop)
    history = levels[starts[:, None] - cfg.l_i + np.arange(cfg.l_i)[None, :]]
    received = levels[starts[:, None] + np.arange(cfg.l_o)[None, :]]
    sims = segment_similarities(bank, codebook, history, received)

    raw = [MI_TASK if s >= cfg.s_th else REST for s in sims]
    corrected = error_correct(raw, cfg.n_s)
    lookahead = (cfg.n_s // 2) * cfg.hop
    return [
        SegmentDecision(
            segment_index=k,
            start_sample=int(start),
            similarity=float(sims[k]),
            raw_label=raw[k],
            corrected_label=corrected[k],
            raw_available_at_sample=int(start) + cfg.l_o,
            decision_available_at_sample=int(start) + cfg.l_o + lookahead,
        )
        for k, start in enumerate(starts)
    ]


# ============ Threshold Tuning ============

def fold_assignment(n_windows: int, folds: int, groups: np.ndarray | None = None,
                    rng_seed: int = 0) -> np.ndarray:
    """
    Fold id per window; windows sharing a group always share a fold.

    Grouped folds come from GroupKFold (balanced by window count), plain
    ones from a shuffled KFold seeded with `rng_seed`.
    """
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    n_units = n_windows if groups is None else len(np.unique(groups))
    if folds > n_units:
        raise ValueError(f"folds ({folds}) > number of independent units ({n_units})")
    if groups is None:
        splits = KFold(n_splits=folds, shuffle=True, random_state=rng_seed).split(np.arange(n_windows))
    else:
        splits = GroupKFold(n_splits=folds).split(np.arange(n_windows), groups=np.asarray(groups))
    fold_of = np.empty(n_windows, dtype=np.int64)
    for k, (_, held_out) in enumerate(splits):
        fold_of[held_out] = k
    return fold_of


def _f1_threshold(mi_sims: np.ndarray, rest_sims: np.ndarray) -> float:
    grid = np.arange(1001) / 1000.0
    best_th, best_f1 = 0.0, -1.0
    for th in grid:
        tp = int(np.sum(mi_sims >= th))
        fp = int(np.sum(rest_sims >= th))
        report = compute_metrics(Confusion(tp=tp, tn=len(rest_sims) - fp, fp=fp, fn=len(mi_sims) - tp))
        f1 = -1.0 if report.f1 is None else report.f1
        if f1 > best_f1:
            best_th, best_f1 = float(th), f1
    return best_th


def tune_threshold(train_inputs: np.ndarray, train_targets: np.ndarray, codebook: Codebook,
                   train_cfg: TrainConfig, mode: str = TUNING_PERCENTILE, folds: int = 5,
                   alpha: float = 0.05, groups: np.ndarray | None = None,
                   rest_inputs: np.ndarray | None = None, rest_targets: np.ndarray | None = None,
                   workers: int = 1,
                   on_fold: Callable[[int, int, int], None] | None = None) -> ThresholdResult:
    """
    Pick S_th by k-fold cross validation on MI windows (level tensors).

    Each fold trains a fresh bank on the other folds and scores its held-out
    MI windows. "percentile": S_th is the alpha-quantile of the pooled
    held-out MI similarities. "f1": held-out MI (positives) and rest
    windows (negatives) are pooled and S_th maximises F1 on a 0.001 grid,
    ties to the lowest threshold.
    """
    if mode not in TUNING_MODES:
        raise ValueError(f"unknown tuning mode {mode!r}, expected one of {TUNING_MODES}")
    if not 0 <= alpha <= 1:
        raise ValueError(f"percentile alpha must be in [0, 1], got {alpha}")
    has_rest = rest_inputs is not None and len(rest_inputs) > 0
    if mode == TUNING_F1 and not has_rest:
        raise ValueError("f1 tuning needs validation rest windows")

    n_windows = len(train_inputs)
    if folds > n_windows:
        raise ValueError(f"folds ({folds}) > N ({n_windows})")
    fold_of = fold_assignment(n_windows, folds, groups, train_cfg.rng_seed)
    rest_fold_of = np.arange(len(rest_inputs)) % folds if has_rest else np.zeros(0, dtype=np.int64)

    mi_sims, rest_sims, fold_sizes = [], [], []
    for k in range(folds):
        held_out = fold_of == k
        fold_seed = int(np.random.SeedSequence([train_cfg.rng_seed, k + 1]).generate_state(1)[0])
        fold_bank = train_bank(train_inputs[~held_out], train_targets[~held_out], codebook.v,
                               replace(train_cfg, rng_seed=fold_seed), workers=workers)
        mi_sims.append(segment_similarities(fold_bank, codebook, train_inputs[held_out], train_targets[held_out]))
        if has_rest:
            rest_held = rest_fold_of == k
            rest_sims.append(segment_similarities(fold_bank, codebook, rest_inputs[rest_held], rest_targets[rest_held]))
        fold_sizes.append(int(held_out.sum()))
        if on_fold is not None:
            on_fold(k, int((~held_out).sum()), int(held_out.sum()))

    mi_sims = np.concatenate(mi_sims)
    rest_sims = np.concatenate(rest_sims) if rest_sims else np.zeros(0)
    s_th = threshold_from_similarities(mi_sims, mode, alpha, rest_sims)
    return ThresholdResult(s_th=s_th, mode=mode, mi_similarities=mi_sims,
                           rest_similarities=rest_sims, fold_sizes=fold_sizes)


def threshold_from_similarities(mi_sims: np.ndarray, mode: str = TUNING_PERCENTILE, alpha: float = 0.05,
                                rest_sims: np.ndarray | None = None) -> float:
    """The selection rule of tune_threshold applied to already pooled similarities."""
    mi_sims = np.asarray(mi_sims, dtype=np.float64)
    if mode == TUNING_PERCENTILE:
        return float(np.clip(np.quantile(mi_sims, alpha), 0.0, 1.0))
    if mode == TUNING_F1:
        if rest_sims is None or len(rest_sims) == 0:
            raise ValueError("f1 tuning needs validation rest windows")
        return _f1_threshold(mi_sims, np.asarray(rest_sims, dtype=np.float64))
    raise ValueError(f"unknown tuning mode {mode!r}, expected one of {TUNING_MODES}")


# ============ Decision Files ============

def decisions_frame(decisions: list[SegmentDecision]) -> pd.DataFrame:
    return pd.DataFrame({
        'segment_index': [d.segment_index for d in decisions],
        'start_sample': [d.start_sample for d in decisions],
        'S': [d.similarity for d in decisions],
        'raw_label': [d.raw_label for d in decisions],
        'corrected_label': [d.corrected_label for d in decisions],
        'decision_available_at_sample': [d.decision_available_at_sample for d in decisions],
    }, columns=DECISION_COLUMNS)


def write_decisions(decisions: list[SegmentDecision], path: str | Path) -> None:
    atomic_write_text(path, decisions_frame(decisions).to_csv(index=False, float_format='%.6f', lineterminator='\n'))


def read_decisions(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"decisions file not found: {path}")
    frame = pd.read_csv(path)
    if list(frame.columns) != DECISION_COLUMNS:
        raise ValueError(f"{path} has columns {list(frame.columns)}, expected {DECISION_COLUMNS}")
    for column in ('raw_label', 'corrected_label'):
        bad = set(frame[column]) - {MI_TASK, REST}
        if bad:
            raise ValueError(f"{path}: unknown labels {sorted(bad)} in {column}")
    return frame
