import json

import pandas as pd
import pytest

from metrics import (REPORT_COLUMNS, Confusion, compute_metrics, confusion_counts, improvement_ratio,
                     report_frame, sweep_frame, write_reports, write_sweep)
from signal_io import MI_TASK, REST


def f1_from(precision, tpr):
    """Confusion with the given precision/TPR (1000 positives), scored through compute_metrics."""
    tp = round(tpr * 1000)
    fn = 1000 - tp
    fp = round(tp / precision) - tp
    return compute_metrics(Confusion(tp=tp, tn=500, fp=fp, fn=fn)).f1


# precision, TPR, reported F1
TIME_VS_TIME_SCALE = [
    (0.63, 0.935, 0.753),
    (0.953, 0.892, 0.921),
]
BASELINE_DETECTOR = [
    (0.769, 0.582, 0.663),
    (0.809, 0.585, 0.679),
    (0.862, 0.587, 0.698),
    (0.869, 0.521, 0.651),
]
HIDDEN_SIZE_RAW = [
    (0.81, 0.86, 0.834), (0.83, 0.92, 0.873), (0.87, 0.96, 0.913), (0.84, 0.97, 0.900),
    (0.91, 0.92, 0.915), (0.89, 0.96, 0.924), (0.87, 0.97, 0.917), (0.87, 0.95, 0.908),
]
HIDDEN_SIZE_CORRECTED = [
    (0.88, 0.91, 0.895), (0.92, 0.97, 0.944), (0.93, 0.98, 0.954), (0.92, 0.99, 0.954),
    (0.96, 0.94, 0.950), (0.95, 0.98, 0.965), (0.94, 0.99, 0.964), (0.94, 0.97, 0.955),
]


def harmonic(precision, tpr):
    return 2 * precision * tpr / (precision + tpr)


@pytest.mark.parametrize("precision, tpr, f1", TIME_VS_TIME_SCALE + BASELINE_DETECTOR)
def test_reported_f1_values_follow_from_precision_and_tpr(precision, tpr, f1):
    assert harmonic(precision, tpr) == pytest.approx(f1, abs=0.001)


@pytest.mark.parametrize("precision, tpr, f1", HIDDEN_SIZE_RAW + HIDDEN_SIZE_CORRECTED)
def test_hidden_size_rows_f1(precision, tpr, f1):
    assert harmonic(precision, tpr) == pytest.approx(f1, abs=0.001)


@pytest.mark.parametrize("precision, tpr, f1", [(0.953, 0.892, 0.921), (0.809, 0.585, 0.679)])
def test_compute_metrics_reproduces_f1_from_counts(precision, tpr, f1):
    assert f1_from(precision, tpr) == pytest.approx(f1, abs=0.001)


def test_improvement_ratios():
    assert improvement_ratio(0.853, 0.673) == pytest.approx(26.7, abs=0.1)
    assert improvement_ratio(0.948, 0.898) == pytest.approx(5.6, abs=0.1)


def test_improvement_ratio_reports_reductions_as_negative():
    assert improvement_ratio(0.104, 0.195) == pytest.approx(-46.7, abs=0.1)
    assert improvement_ratio(0.034, 0.061) == pytest.approx(-44.3, abs=0.1)


def test_improvement_ratio_zero_baseline():
    with pytest.raises(ValueError):
        improvement_ratio(0.5, 0.0)


def test_compute_metrics_basic():
    report = compute_metrics(Confusion(tp=8, tn=6, fp=2, fn=4), l_o=50, n_s=2, s_th=0.6)
    assert report.precision == pytest.approx(0.8)
    assert report.tpr == pytest.approx(8 / 12)
    assert report.tnr == pytest.approx(0.75)
    assert report.fpr == pytest.approx(0.25)
    assert report.fnr == pytest.approx(4 / 12)
    assert report.f1 == pytest.approx(2 * 0.8 * (8 / 12) / (0.8 + 8 / 12))
    assert report.fpr + report.tnr == pytest.approx(1.0)


def test_no_predicted_positives_gives_na_precision_and_f1():
    report = compute_metrics(Confusion(tp=0, tn=10, fp=0, fn=5))
    assert report.precision is None
    assert report.f1 is None
    assert report.tpr == 0.0
    assert report.row()['Prec.'] == "NA"
    assert report.row()['F1'] == "NA"


def test_no_negatives_gives_na_tnr_and_fpr():
    report = compute_metrics(Confusion(tp=3, tn=0, fp=0, fn=1))
    assert report.tnr is None
    assert report.fpr is None
    assert report.f1 is not None


def test_perfect_detector():
    truth = [MI_TASK, REST, MI_TASK, REST, REST]
    report = compute_metrics(confusion_counts(truth, truth))
    assert report.f1 == 1.0
    assert report.fpr == 0.0
    assert report.fnr == 0.0


def test_confusion_counts():
    pred = [MI_TASK, MI_TASK, REST, REST, MI_TASK]
    truth = [MI_TASK, REST, MI_TASK, REST, MI_TASK]
    assert confusion_counts(pred, truth) == Confusion(tp=2, tn=1, fp=1, fn=1)


def test_confusion_counts_single_class_and_empty():
    assert confusion_counts([REST, REST], [REST, REST]) == Confusion(tn=2)
    assert confusion_counts([REST, MI_TASK], [MI_TASK, MI_TASK]) == Confusion(tp=1, fn=1)
    assert confusion_counts([], []) == Confusion()


def test_confusion_counts_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        confusion_counts([MI_TASK], [MI_TASK, REST])


def test_confusion_counts_unknown_label():
    with pytest.raises(ValueError, match="unknown labels"):
        confusion_counts(["move"], [MI_TASK])


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        Confusion(tp=-1)


def test_report_files(tmp_path):
    reports = {
        'raw': compute_metrics(Confusion(tp=8, tn=6, fp=2, fn=4), l_o=50, n_s=0, s_th=0.6),
        'corrected': compute_metrics(Confusion(tp=0, tn=6, fp=0, fn=4), l_o=50, n_s=2, s_th=0.6),
    }
    write_reports(reports, tmp_path / "report.json", tmp_path / "report.csv")

    payload = json.loads((tmp_path / "report.json").read_text())
    assert set(payload) == {'raw', 'corrected'}
    assert payload['raw']['precision'] == 0.8
    assert payload['corrected']['f1'] == "NA"
    assert payload['raw']['confusion'] == {'TP': 8, 'TN': 6, 'FP': 2, 'FN': 4}
    assert payload['corrected']['config']['N_s'] == 2

    frame = pd.read_csv(tmp_path / "report.csv", keep_default_na=False)
    assert list(frame.columns) == ['labels', *REPORT_COLUMNS]
    assert frame['labels'].tolist() == ['raw', 'corrected']
    assert frame.loc[1, 'F1'] == "NA"


def test_report_frame_formats_six_decimals():
    frame = report_frame({'raw': compute_metrics(Confusion(tp=1, tn=2, fp=2, fn=0))})
    assert frame.loc[0, 'Prec.'] == "0.333333"


def test_sweep_grid_shape(tmp_path):
    rows = []
    for n_h in (10, 30, 50, 90):
        raw = compute_metrics(Confusion(tp=8, tn=6, fp=2, fn=4))
        corrected = compute_metrics(Confusion(tp=9, tn=7, fp=1, fn=3))
        rows.append(({'n_h': n_h, 'l_o_s': 0.5}, raw, corrected))
    frame = sweep_frame(rows)
    assert frame['n_h'].tolist() == [10, 30, 50, 90]
    assert 'raw F1' in frame.columns and 'corrected F1' in frame.columns
    assert len(frame.columns) == 2 + 2 * len(REPORT_COLUMNS)

    write_sweep(rows, tmp_path / "sweep.csv")
    assert pd.read_csv(tmp_path / "sweep.csv").shape == (4, 14)


def test_sweep_frame_rejects_empty_sweep():
    with pytest.raises(ValueError):
        sweep_frame([])
