"""
Segment-level confusion counts, derived metrics and report files.

MI-task segments are the positive class. Any 0/0 ratio is undefined and
rendered as "NA".
"""

import json
from dataclasses import dataclass
from pathlib import Path

import pandas as pd
from sklearn.metrics import confusion_matrix

from checkpoint import atomic_write_text
from signal_io import LABELS, MI_TASK, REST

REPORT_COLUMNS = ['Prec.', 'TPR', 'TNR', 'FPR', 'FNR', 'F1']
NA = "NA"


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ('tp', 'tn', 'fp', 'fn'):
            if getattr(self, name) < 0:
                raise ValueError(f"confusion count {name} must be >= 0")

    def to_dict(self) -> dict:
        return {'TP': self.tp, 'TN': self.tn, 'FP': self.fp, 'FN': self.fn}


@dataclass(frozen=True)
class EvalReport:
    confusion: Confusion
    precision: float | None
    tpr: float | None
    tnr: float | None
    fpr: float | None
    fnr: float | None
    f1: float | None
    l_o: int | None = None
    n_s: int | None = None
    s_th: float | None = None

    def row(self) -> dict[str, str]:
        """Metric values in table column order, 6 decimals or NA."""
        values = (self.precision, self.tpr, self.tnr, self.fpr, self.fnr, self.f1)
        return {column: format_value(value) for column, value in zip(REPORT_COLUMNS, values)}

    def to_dict(self) -> dict:
        def fixed(value):
            return NA if value is None else round(value, 6)
        return {
            'confusion': self.confusion.to_dict(),
            'precision': fixed(self.precision),
            'tpr': fixed(self.tpr),
            'tnr': fixed(self.tnr),
            'fpr': fixed(self.fpr),
            'fnr': fixed(self.fnr),
            'f1': fixed(self.f1),
            'config': {'l_o': self.l_o, 'N_s': self.n_s, 'S_th': fixed(self.s_th) if self.s_th is not None else None},
        }


def format_value(value: float | None) -> str:
    return NA if value is None else f"{value:.6f}"


def _ratio(numerator: int, denominator: int) -> float | None:
    return None if denominator == 0 else numerator / denominator


# ============ Metrics ============

def confusion_counts(pred: list[str], truth: list[str]) -> Confusion:
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} labels")
    unknown = (set(pred) | set(truth)) - set(LABELS)
    if unknown:
        raise ValueError(f"unknown labels {sorted(unknown)}")
    if not truth:
        return Confusion()
    tn, fp, fn, tp = confusion_matrix(truth, pred, labels=[REST, MI_TASK]).ravel()
    return Confusion(tp=int(tp), tn=int(tn), fp=int(fp), fn=int(fn))


def compute_metrics(c: Confusion, l_o: int | None = None, n_s: int | None = None,
                    s_th: float | None = None) -> EvalReport:
    precision = _ratio(c.tp, c.tp + c.fp)
    tpr = _ratio(c.tp, c.tp + c.fn)
    tnr = _ratio(c.tn, c.tn + c.fp)
    fpr = None if tnr is None else 1.0 - tnr
    fnr = None if tpr is None else 1.0 - tpr
    if precision is None or tpr is None or precision + tpr == 0:
        f1 = None
    else:
        f1 = 2 * precision * tpr / (precision + tpr)
    return EvalReport(confusion=c, precision=precision, tpr=tpr, tnr=tnr, fpr=fpr, fnr=fnr, f1=f1,
                      l_o=l_o, n_s=n_s, s_th=s_th)


def improvement_ratio(f1_new: float, f1_base: float) -> float:
    """Relative change in percent, 100 * (new / base - 1); negative for reductions."""
    if f1_base <= 0:
        raise ValueError("improvement ratio needs a positive baseline")
    return 100.0 * (f1_new / f1_base - 1.0)


# ============ Report Files ============

def report_frame(reports: dict[str, EvalReport], index_name: str = 'labels') -> pd.DataFrame:
    rows = [{index_name: name, **report.row()} for name, report in reports.items()]
    return pd.DataFrame(rows, columns=[index_name, *REPORT_COLUMNS])


def write_reports(reports: dict[str, EvalReport], json_path: str | Path, csv_path: str | Path) -> None:
    payload = {name: report.to_dict() for name, report in reports.items()}
    atomic_write_text(json_path, json.dumps(payload, indent=2) + '\n')
    atomic_write_text(csv_path, report_frame(reports).to_csv(index=False, lineterminator='\n'))


def sweep_frame(rows: list[tuple[dict, EvalReport, EvalReport]]) -> pd.DataFrame:
    """
    Raw vs corrected metrics per sweep point, one row per point.

    Columns: the point's keys (e.g. n_h, l_o_s), then REPORT_COLUMNS
    prefixed "raw " and "corrected ".
    """
    if not rows:
        raise ValueError("sweep has no points")
    key_names = list(rows[0][0])
    records = []
    for keys, raw, corrected in rows:
        if list(keys) != key_names:
            raise ValueError(f"sweep point keys {list(keys)} differ from {key_names}")
        record = dict(keys)
        record.update({f"raw {column}": value for column, value in raw.row().items()})
        record.update({f"corrected {column}": value for column, value in corrected.row().items()})
        records.append(record)
    columns = key_names + [f"raw {c}" for c in REPORT_COLUMNS] + [f"corrected {c}" for c in REPORT_COLUMNS]
    return pd.DataFrame(records, columns=columns)


def write_sweep(rows: list[tuple[dict, EvalReport, EvalReport]], path: str | Path) -> None:
    atomic_write_text(path, sweep_frame(rows).to_csv(index=False, lineterminator='\n'))
