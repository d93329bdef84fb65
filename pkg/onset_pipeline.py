"""
Self-paced Motor Imagery Onset Detection Pipeline

Trains a bank of LSTM encoder-decoders on MI EEG only, then labels every
segment of a continuous recording by how well the bank predicted it.

Usage:
    python onset_pipeline.py pipeline                                          # Synthetic end-to-end run
    python onset_pipeline.py pipeline --config configs/fast.yaml --out runs/fast
    python onset_pipeline.py pipeline --n-h 10 30 50 90                        # n_h sweep, writes sweep.csv
    python onset_pipeline.py pipeline --l-o 0.25 0.5 0.75 1                    # segment-length sweep
    python onset_pipeline.py synth --out runs/default                          # Synthetic trials + stream
    python onset_pipeline.py preprocess --in runs/default/synth --out runs/default
    python onset_pipeline.py train --out runs/default --workers 4
    python onset_pipeline.py train --out runs/default --fresh                  # Ignore checkpoints
    python onset_pipeline.py tune --out runs/default
    python onset_pipeline.py detect --in runs/default/synth --out runs/default
    python onset_pipeline.py evaluate --in runs/default/synth --out runs/default

Input directory (--in) layout, as written by `synth`:
    train/*.json + .f32     MI training trials
    val/*.json + .f32       rest trials for threshold tuning (optional)
    stream.json + .f32      continuous recording with mi_task / rest markers

Environment (.env):
    ONSET_WORKERS           worker processes for ED-bank training (default 1)
    ONSET_CHECKPOINT_DIR    training checkpoints (default <out>/checkpoints)
"""

import copy
import hashlib
import io
import json
import os
from pathlib import Path
from datetime import datetime
from dataclasses import dataclass, field, replace
from dotenv import load_dotenv

import numpy as np

from bundle import ModelBundle, load_bundle, save_bundle
from checkpoint import BankCheckpoint, CheckpointManager, atomic_write_bytes, atomic_write_text
from config import ConfigError, PipelineConfig, SweepSettings, parse_config
from detector import DetectorConfig, detect_stream, read_decisions, tune_threshold, write_decisions
from metrics import EvalReport, compute_metrics, confusion_counts, improvement_ratio, write_reports, write_sweep
from predictor import TrainingError, bank_pairs, train_bank
from preprocess import (FEATURES_TIME, CwtSpec, PcaModel, pca_fit, preprocess_recording, spatial_and_band,
                        windows_from_series)
from quantizer import Codebook, fit_codebook, quantize_array
from signal_io import (MI_TASK, MU_BAND_HZ, Recording, band_power, compose_continuous, load_recording,
                       save_recording, segment_truth, split_trials, synth_generate)

load_dotenv()

COMMANDS = ('synth', 'preprocess', 'train', 'tune', 'detect', 'evaluate', 'pipeline')

PREPROCESS_FILE = "preprocess.json"
SERIES_FILE = "series.npz"
STREAM_NAME = "stream"
DECISIONS_FILE = "decisions.csv"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
SWEEP_FILE = "sweep.csv"

# a segment is mi_task when more than this fraction of it lies inside MI markers
OVERLAP_RULE = 0.5


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(message)


# ============ Configuration ============

def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(name, f"must be an integer, got {raw!r}") from None


def _env_path(name: str) -> Path | None:
    raw = os.getenv(name)
    return Path(raw) if raw else None


@dataclass
class RuntimeSettings:
    workers: int = field(default_factory=lambda: _env_int("ONSET_WORKERS", 1))
    checkpoint_dir: Path | None = field(default_factory=lambda: _env_path("ONSET_CHECKPOINT_DIR"))
    fresh: bool = False


@dataclass
class RunPaths:
    out: Path
    data: Path | None = None            # --in; defaults to <out>/synth
    checkpoints: Path | None = None

    @property
    def synth_dir(self) -> Path:
        return self.out / "synth"

    @property
    def data_dir(self) -> Path:
        return self.data if self.data is not None else self.synth_dir

    @property
    def preprocess_dir(self) -> Path:
        return self.out / "preprocess"

    @property
    def checkpoint_dir(self) -> Path:
        return self.checkpoints if self.checkpoints is not None else self.out / "checkpoints"

    def point_dir(self, point: PipelineConfig) -> Path:
        return self.out / point_name(point)


def point_name(point: PipelineConfig) -> str:
    return f"nh{point.train.n_h}_lo{point.l_o}"


def sweep_points(cfg: PipelineConfig) -> list[PipelineConfig]:
    """One resolved config per (n_h, l_o) combination; the plain config when nothing is swept."""
    n_hs = cfg.sweep.n_h or [cfg.train.n_h]
    l_os = cfg.sweep.l_o_s or [cfg.l_o_s]
    return [cfg.with_overrides(n_h=n_h, l_o_s=l_o_s) for n_h in n_hs for l_o_s in l_os]


# ============ Logging ============

def log(message: str):
    print(f"[{datetime.now().strftime('%Y-%m-%d %H:%M:%S')}] {message}")


# ============ Recordings ============

def _load_trials(directory: Path) -> list[Recording]:
    if not directory.is_dir():
        raise FileNotFoundError(f"trial directory not found: {directory}")
    return [load_recording(path) for path in sorted(directory.glob("*.json"))]


def _clear_recordings(directory: Path) -> None:
    if directory.is_dir():
        for path in list(directory.glob("*.json")) + list(directory.glob("*.f32")):
            path.unlink()


def stage_synth(cfg: PipelineConfig, paths: RunPaths) -> None:
    log("=== Synthesising trials ===")
    mi_trials, rest_trials = synth_generate(cfg.synth)
    train_mi, test_mi = split_trials(mi_trials, cfg.split.train_fraction, cfg.split.seed)
    if cfg.split.val_rest_fraction > 0:
        val_rest, stream_rest = split_trials(rest_trials, cfg.split.val_rest_fraction, cfg.split.seed)
    else:
        val_rest, stream_rest = [], rest_trials
    stream = compose_continuous(test_mi, stream_rest, cfg.stream.seed, cfg.stream.min_rest_s, cfg.stream.max_rest_s)

    out = paths.synth_dir
    _clear_recordings(out / "train")
    _clear_recordings(out / "val")
    for k, trial in enumerate(train_mi):
        save_recording(trial, out / "train" / f"mi_{k:03d}")
    for k, trial in enumerate(val_rest):
        save_recording(trial, out / "val" / f"rest_{k:03d}")
    save_recording(stream, out / STREAM_NAME)

    fs = cfg.synth.sample_rate_hz
    mi_power = np.mean([band_power(t.samples, fs, *MU_BAND_HZ)[0] for t in mi_trials])
    rest_power = np.mean([band_power(t.samples, fs, *MU_BAND_HZ)[0] for t in rest_trials]) if rest_trials else 0.0
    mi_samples = sum(m.duration_samples for m in stream.markers if m.label == MI_TASK)

    log("=== Summary ===")
    log(f"MI trials: {len(train_mi)} train, {len(test_mi)} in stream")
    log(f"Rest trials: {len(val_rest)} validation, {len(stream_rest)} in stream")
    log(f"Stream: {stream.n_samples} samples ({stream.n_samples / fs:.1f} s), {mi_samples / stream.n_samples:.0%} MI")
    if rest_power > 0:
        log(f"Mu-band power on {stream.channels[0]}: MI/rest = {mi_power / rest_power:.2f}")
    log(f"Written to {out}")


# ============ Preprocessing ============

@dataclass
class PreprocessState:
    pca: PcaModel
    cwt: CwtSpec
    train_series: list[np.ndarray]
    val_series: list[np.ndarray]


def stage_preprocess(cfg: PipelineConfig, paths: RunPaths) -> PreprocessState:
    log("=== Preprocessing ===")
    train_trials = _load_trials(paths.data_dir / "train")
    if not train_trials:
        raise FileNotFoundError(f"no MI training trials in {paths.data_dir / 'train'}")
    val_dir = paths.data_dir / "val"
    val_trials = _load_trials(val_dir) if val_dir.is_dir() else []
    for trial in train_trials + val_trials:
        if trial.sample_rate_hz != cfg.sample_rate_hz:
            raise ValueError(f"trial sampled at {trial.sample_rate_hz} Hz, config says {cfg.sample_rate_hz} Hz")
    log(f"Loaded {len(train_trials)} MI trials, {len(val_trials)} validation rest trials")

    pca = pca_fit([spatial_and_band(t, cfg.bandpass) for t in train_trials], cfg.pca_retention)
    cwt = cfg.cwt_spec()
    train_series = [preprocess_recording(t, cfg.bandpass, pca, cwt, cfg.features) for t in train_trials]
    val_series = [preprocess_recording(t, cfg.bandpass, pca, cwt, cfg.features) for t in val_trials]

    out = paths.preprocess_dir
    arrays = {f"train_{k:03d}": s for k, s in enumerate(train_series)}
    arrays.update({f"val_{k:03d}": s for k, s in enumerate(val_series)})
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    atomic_write_bytes(out / SERIES_FILE, buffer.getvalue())
    meta = {
        'sample_rate_hz': cfg.sample_rate_hz,
        'features': cfg.features,
        'bandpass': cfg.bandpass.to_dict(),
        'pca': pca.to_dict(),
        'cwt': cwt.to_dict(),
        'n_train': len(train_series),
        'n_val': len(val_series),
    }
    atomic_write_text(out / PREPROCESS_FILE, json.dumps(meta, indent=2) + '\n')

    q = train_series[0].shape[2]
    log(f"PCA keeps m' = {pca.n_components} of {len(pca.channels)} channels "
        f"({pca.explained_fraction:.1%} variance), q = {q}, p = {pca.n_components * q} streams")
    return PreprocessState(pca=pca, cwt=cwt, train_series=train_series, val_series=val_series)


def load_preprocess(cfg: PipelineConfig, paths: RunPaths) -> PreprocessState:
    directory = paths.preprocess_dir
    meta_path, series_path = directory / PREPROCESS_FILE, directory / SERIES_FILE
    for path in (meta_path, series_path):
        if not path.exists():
            raise FileNotFoundError(f"{path} not found, run `preprocess` first")
    meta = json.loads(meta_path.read_text(encoding='utf-8'))
    if (meta['sample_rate_hz'] != cfg.sample_rate_hz or meta['features'] != cfg.features
            or meta['bandpass'] != cfg.bandpass.to_dict() or meta['cwt'] != cfg.cwt_spec().to_dict()):
        raise ValueError(f"{meta_path} was made with different preprocessing settings, rerun `preprocess`")

    pca = PcaModel.from_dict(meta['pca'])
    cwt = CwtSpec.from_dict(meta['cwt'])
    q = 1 if cfg.features == FEATURES_TIME else cwt.q
    with np.load(series_path) as data:
        train_series = [data[f"train_{k:03d}"] for k in range(meta['n_train'])]
        val_series = [data[f"val_{k:03d}"] for k in range(meta['n_val'])]
    for series in train_series + val_series:
        if series.ndim != 3 or series.shape[1:] != (pca.n_components, q):
            raise ValueError(f"series of shape {series.shape} in {series_path}, expected [time x {pca.n_components} x {q}]")
        if not np.all(np.isfinite(series)):
            raise ValueError(f"non-finite values in {series_path}")
    return PreprocessState(pca=pca, cwt=cwt, train_series=train_series, val_series=val_series)


# ============ Training ============

def _level_windows(series_list: list[np.ndarray], codebook: Codebook,
                   point: PipelineConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    inputs, targets = windows_from_series(series_list, point.l_i, point.l_o, point.hop)
    return quantize_array(inputs.data, codebook), quantize_array(targets.data, codebook), inputs.groups


def _fingerprint(input_levels: np.ndarray, target_levels: np.ndarray, point: PipelineConfig) -> str:
    digest = hashlib.sha256()
    digest.update(input_levels.tobytes())
    digest.update(target_levels.tobytes())
    digest.update(json.dumps({'v': point.v, 'train': point.train.to_dict()}, sort_keys=True).encode())
    return digest.hexdigest()


def stage_train(point: PipelineConfig, paths: RunPaths, runtime: RuntimeSettings,
                state: PreprocessState) -> ModelBundle:
    name = point_name(point)
    log(f"=== Training {name} ===")
    codebook = fit_codebook(np.concatenate(state.train_series, axis=0), point.v)
    input_levels, target_levels, _ = _level_windows(state.train_series, codebook, point)
    m, q = codebook.shape
    log(f"{len(input_levels)} windows, {m} x {q} = {m * q} EDs, n_h={point.train.n_h}, "
        f"l_i={point.l_i}, l_o={point.l_o}, workers={runtime.workers}")

    manager = CheckpointManager(paths.checkpoint_dir)
    fingerprint = _fingerprint(input_levels, target_levels, point)
    if runtime.fresh and manager.delete(name):
        log("Discarded existing checkpoint")
    checkpoint = manager.load(name, BankCheckpoint)
    if checkpoint is not None and not checkpoint.matches(fingerprint):
        log("Checkpoint was made for different training data, starting over")
        checkpoint = None
    if checkpoint is None:
        checkpoint = BankCheckpoint(fingerprint=fingerprint)
    elif checkpoint.completed:
        pending = checkpoint.get_pending(bank_pairs(m, q))
        log(f"Resuming from checkpoint: {checkpoint.summary()}, {len(pending)} pending")
    checkpoint.mark_started()

    def on_pair_done(pair, model, curve):
        checkpoint.completed[pair] = model
        manager.save(name, checkpoint)
        log(f"ED {pair}: loss {curve[0]:.4f} -> {curve[-1]:.4f} ({len(checkpoint.completed)}/{m * q})")

    try:
        models = train_bank(input_levels, target_levels, point.v, point.train, workers=runtime.workers,
                            completed=checkpoint.completed, on_pair_done=on_pair_done)
    except KeyboardInterrupt:
        manager.save(name, checkpoint)
        raise StageError("train", f"interrupted, {checkpoint.summary()} saved to {manager.directory}") from None

    bundle = ModelBundle(config=point, pca=state.pca, cwt=state.cwt, codebook=codebook, models=models)
    directory = save_bundle(bundle, paths.point_dir(point) / "bundle")
    if checkpoint.started_at:
        log(f"Runtime: {datetime.now() - checkpoint.started_at}")
    log(f"Bundle written to {directory}")
    return bundle


def stage_tune(point: PipelineConfig, paths: RunPaths, runtime: RuntimeSettings,
               state: PreprocessState) -> ModelBundle:
    name = point_name(point)
    log(f"=== Tuning S_th for {name} ===")
    bundle_dir = paths.point_dir(point) / "bundle"
    bundle = load_bundle(bundle_dir)
    input_levels, target_levels, groups = _level_windows(state.train_series, bundle.codebook, bundle.config)
    rest_inputs = rest_targets = None
    if state.val_series:
        rest_inputs, rest_targets, _ = _level_windows(state.val_series, bundle.codebook, bundle.config)

    settings = point.detector
    train_cfg = bundle.train_config
    if settings.tuning_epochs is not None:
        train_cfg = replace(train_cfg, epochs=settings.tuning_epochs)

    def on_fold(k, n_train, n_held):
        log(f"Fold {k + 1}/{settings.folds}: trained on {n_train} windows, scored {n_held}")

    result = tune_threshold(input_levels, target_levels, bundle.codebook, train_cfg,
                            mode=settings.tuning_mode, folds=settings.folds, alpha=settings.percentile_alpha,
                            groups=groups, rest_inputs=rest_inputs, rest_targets=rest_targets,
                            workers=runtime.workers, on_fold=on_fold)
    bundle = bundle.with_threshold(result.s_th)
    save_bundle(bundle, bundle_dir)

    log("=== Summary ===")
    log(f"Mode: {result.mode}, S_th = {result.s_th:.4f}")
    log(f"Held-out MI similarity: median {np.median(result.mi_similarities):.4f}")
    if result.rest_similarities.size:
        log(f"Validation rest similarity: median {np.median(result.rest_similarities):.4f}")
    return bundle


# ============ Detection & Evaluation ============

def stage_detect(point: PipelineConfig, paths: RunPaths) -> None:
    name = point_name(point)
    log(f"=== Detecting with {name} ===")
    bundle = load_bundle(paths.point_dir(point) / "bundle")
    if bundle.s_th is None:
        raise ValueError("threshold not tuned")
    stream = load_recording(paths.data_dir / STREAM_NAME)
    series = bundle.preprocess(stream)
    cfg = DetectorConfig(s_th=bundle.s_th, l_i=bundle.l_i, l_o=bundle.l_o, hop=bundle.config.hop,
                         n_s=point.detector.n_s)
    decisions = detect_stream(series, bundle.models, bundle.codebook, cfg)
    write_decisions(decisions, paths.point_dir(point) / DECISIONS_FILE)
    n_raw = sum(d.raw_label == MI_TASK for d in decisions)
    n_corrected = sum(d.corrected_label == MI_TASK for d in decisions)
    log(f"{len(decisions)} segments: {n_raw} mi_task raw, {n_corrected} after correction (N_s={cfg.n_s})")


def evaluate_decisions(decisions, stream: Recording, l_i: int, l_o: int, hop: int, n_s: int,
                       s_th: float | None = None) -> dict[str, EvalReport]:
    """Join decisions with ground truth; reports for raw and corrected labels."""
    truth = segment_truth(stream, l_o, hop, OVERLAP_RULE, offset=l_i)
    if len(decisions) != len(truth):
        raise ValueError(f"{len(decisions)} decisions for {len(truth)} ground-truth segments")
    merged = decisions.merge(truth, on='segment_index', how='inner', suffixes=('', '_truth'),
                             validate='one_to_one')
    if len(merged) != len(truth) or not (merged['start_sample'] == merged['start_sample_truth']).all():
        raise ValueError("decision segments do not line up with the ground-truth segments")
    truth_labels = merged['label'].tolist()
    raw = confusion_counts(merged['raw_label'].tolist(), truth_labels)
    corrected = confusion_counts(merged['corrected_label'].tolist(), truth_labels)
    return {
        'raw': compute_metrics(raw, l_o=l_o, n_s=0, s_th=s_th),
        'corrected': compute_metrics(corrected, l_o=l_o, n_s=n_s, s_th=s_th),
    }


def stage_evaluate(point: PipelineConfig, paths: RunPaths) -> dict[str, EvalReport]:
    name = point_name(point)
    log(f"=== Evaluating {name} ===")
    bundle = load_bundle(paths.point_dir(point) / "bundle")
    decisions = read_decisions(paths.point_dir(point) / DECISIONS_FILE)
    stream = load_recording(paths.data_dir / STREAM_NAME)
    reports = evaluate_decisions(decisions, stream, bundle.l_i, bundle.l_o, bundle.config.hop,
                                 point.detector.n_s, bundle.s_th)
    write_reports(reports, paths.point_dir(point) / REPORT_JSON, paths.point_dir(point) / REPORT_CSV)
    for label, report in reports.items():
        row = report.row()
        log(f"{label:>9}: " + "  ".join(f"{column} {value}" for column, value in row.items()))
    return reports


def _sweep_key(point: PipelineConfig) -> dict:
    return {'n_h': point.train.n_h, 'l_o_s': point.l_o_s}


# ============ Commands ============

STAGE_ERRORS = (ValueError, TypeError, OSError, TrainingError)


def _run_stage(stage: str, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except STAGE_ERRORS as e:
        raise StageError(stage, str(e)) from e


def run_pipeline(cfg: PipelineConfig, paths: RunPaths, runtime: RuntimeSettings) -> None:
    """synth -> preprocess -> (train -> tune -> detect -> evaluate) per sweep point, on synthetic data."""
    paths = replace(paths, data=None)
    _run_stage('synth', stage_synth, cfg, paths)
    state = _run_stage('preprocess', stage_preprocess, cfg, paths)

    rows = []
    for point in sweep_points(cfg):
        _run_stage('train', stage_train, point, paths, runtime, state)
        _run_stage('tune', stage_tune, point, paths, runtime, state)
        _run_stage('detect', stage_detect, point, paths)
        reports = _run_stage('evaluate', stage_evaluate, point, paths)
        rows.append((_sweep_key(point), reports['raw'], reports['corrected']))
    _run_stage('evaluate', write_sweep, rows, paths.out / SWEEP_FILE)

    log("=== Summary ===")
    for keys, raw, corrected in rows:
        line = f"n_h={keys['n_h']} l_o={keys['l_o_s']}s: F1 {raw.row()['F1']} raw, {corrected.row()['F1']} corrected"
        if raw.f1 and corrected.f1 is not None:
            line += f" ({improvement_ratio(corrected.f1, raw.f1):+.1f}%)"
        log(line)
    log(f"Sweep grid written to {paths.out / SWEEP_FILE}")


def run(command: str, cfg: PipelineConfig, paths: RunPaths, runtime: RuntimeSettings) -> int:
    """Run one command; returns the exit status."""
    try:
        if command == 'pipeline':
            run_pipeline(cfg, paths, runtime)
        elif command == 'synth':
            _run_stage('synth', stage_synth, cfg, paths)
        elif command == 'preprocess':
            _run_stage('preprocess', stage_preprocess, cfg, paths)
        elif command in ('train', 'tune'):
            state = _run_stage(command, load_preprocess, cfg, paths)
            stage = stage_train if command == 'train' else stage_tune
            for point in sweep_points(cfg):
                _run_stage(command, stage, point, paths, runtime, state)
        elif command == 'detect':
            for point in sweep_points(cfg):
                _run_stage('detect', stage_detect, point, paths)
        elif command == 'evaluate':
            rows = []
            for point in sweep_points(cfg):
                reports = _run_stage('evaluate', stage_evaluate, point, paths)
                rows.append((_sweep_key(point), reports['raw'], reports['corrected']))
            if len(rows) > 1:
                _run_stage('evaluate', write_sweep, rows, paths.out / SWEEP_FILE)
        else:
            raise StageError(command, f"unknown command, expected one of {COMMANDS}")
    except StageError as e:
        print(f"ERROR: {e.stage}: {e}")
        return 1
    return 0


# ============ Main ============

def parse_args(argv: list[str] | None = None):
    """Parse command line arguments."""
    import argparse

    parser = argparse.ArgumentParser(
        description="Self-paced MI onset detection with an LSTM encoder-decoder bank"
    )
    parser.add_argument("command", choices=COMMANDS, help="Stage to run")
    parser.add_argument(
        "--config",
        type=Path,
        default=None,
        help="YAML config file (default: built-in defaults)"
    )
    parser.add_argument(
        "--in",
        dest="data",
        type=Path,
        default=None,
        help="Input recordings directory (default: <out>/synth)"
    )
    parser.add_argument(
        "--out",
        type=Path,
        default=Path("runs/default"),
        help="Run directory for all artifacts (default: runs/default)"
    )
    parser.add_argument("--seed", type=int, default=None, help="Override every seed in the config")
    parser.add_argument(
        "--workers",
        type=int,
        default=None,
        help="Worker processes for ED-bank training (default: $ONSET_WORKERS or 1)"
    )
    parser.add_argument("--n-h", type=int, nargs="+", metavar="N", help="Hidden sizes to sweep")
    parser.add_argument("--l-o", type=float, nargs="+", metavar="SECONDS", help="Segment lengths to sweep")
    parser.add_argument("--fresh", action="store_true", help="Ignore existing training checkpoints")

    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)

    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.n_h or args.l_o:
            cfg = copy.deepcopy(cfg)
            cfg.sweep = SweepSettings(n_h=args.n_h or cfg.sweep.n_h, l_o_s=args.l_o or cfg.sweep.l_o_s)
            cfg.resolve()
        runtime = RuntimeSettings(fresh=args.fresh)
        if args.workers is not None:
            runtime.workers = args.workers
        if runtime.workers < 1:
            raise ConfigError("workers", f"must be >= 1, got {runtime.workers}")
    except (ConfigError, FileNotFoundError) as e:
        print(f"ERROR: config: {e}")
        return 1

    paths = RunPaths(out=args.out, data=args.data, checkpoints=runtime.checkpoint_dir)
    log(f"Running `{args.command}` into {paths.out}")
    return run(args.command, cfg, paths, runtime)


if __name__ == "__main__":
    exit(main())
