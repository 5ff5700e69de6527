import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dsbel.metrics import (
    ConfusionMatrix, MetricsError, compute_metrics, confusion, pair_auc, pr_curve, roc_auc, roc_curve,
)
from dsbel.report import emit_report, metrics_csv, pca_svg, read_metrics_csv, roc_svg

M, B = 1, 0
SVG = "{http://www.w3.org/2000/svg}"


def substitute(tp, tn, fp, fn):
    """Textbook formulas written out term by term, zero conventions applied."""
    total = tp + tn + fp + fn
    acc = (tp + tn) / total * 100
    prec = 0.0 if tp + fp == 0 else tp / (tp + fp) * 100
    rec = 0.0 if tp + fn == 0 else tp / (tp + fn) * 100
    f1 = 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = 0.0 if den == 0 else (tp * tn - fp * fn) / den ** 0.5
    return acc, prec, rec, f1, mcc


# ---- confusion ----------------------------------------------------------------

@pytest.mark.parametrize("pred,truth,expected", [
    ([M, M, M, B, B], [M, M, M, B, B], (3, 2, 0, 0)),
    ([B, B, B, B], [M, M, B, B], (0, 2, 0, 2)),
    ([M, B, M, B, M, B], [M, M, B, B, M, B], (2, 2, 1, 1)),
])
def test_confusion_examples(pred, truth, expected):
    cm = confusion(pred, truth)
    assert (cm.tp, cm.tn, cm.fp, cm.fn) == expected
    assert cm.total == len(pred)


def test_confusion_errors():
    with pytest.raises(MetricsError):
        confusion([1, 0], [1])
    with pytest.raises(MetricsError):
        confusion([2], [1])
    with pytest.raises(MetricsError):
        ConfusionMatrix(-1, 0, 0, 0)


# ---- metrics -----------------------------------------------------------------

def test_metrics_two_two_one_one():
    m = compute_metrics(ConfusionMatrix(2, 2, 1, 1))
    for v in (m.accuracy, m.precision, m.recall, m.f1):
        assert v == pytest.approx(200 / 3, abs=1e-9)
    assert m.mcc == pytest.approx(1 / 3, abs=1e-12)


def test_metrics_perfect_and_one_class():
    m = compute_metrics(ConfusionMatrix(5, 3, 0, 0))
    assert (m.accuracy, m.mcc) == (100.0, 1.0)
    m = compute_metrics(confusion([B] * 4, [M, M, B, B]))
    assert m.mcc == 0.0 and m.precision == 0.0 and m.f1 == 0.0


def test_metrics_empty_rejected():
    with pytest.raises(MetricsError):
        compute_metrics(ConfusionMatrix(0, 0, 0, 0))


def test_metrics_match_direct_substitution_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        counts = rng.integers(0, 50, 4) * (rng.random(4) > 0.15)
        if counts.sum() == 0:
            counts[1] = 1
        tp, tn, fp, fn = (int(c) for c in counts)
        got = compute_metrics(ConfusionMatrix(tp, tn, fp, fn))
        want = substitute(tp, tn, fp, fn)
        for g, w in zip((got.accuracy, got.precision, got.recall, got.f1, got.mcc), want):
            assert g == pytest.approx(w, rel=1e-12, abs=1e-12)
        assert -1 <= got.mcc <= 1


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50))
def test_accuracy_invariant_under_class_swap(pairs):
    pred, truth = map(np.array, zip(*pairs))
    a = compute_metrics(confusion(pred, truth)).accuracy
    b = compute_metrics(confusion(1 - pred, 1 - truth)).accuracy
    assert a == b


# ---- ROC / PR -----------------------------------------------------------------

def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.4, 0.3], [M, M, B, B])[1] == 1.0
    assert roc_auc([0.3, 0.4, 0.8, 0.9], [M, M, B, B])[1] == 0.0
    assert roc_auc([0.9, 0.35, 0.4, 0.3], [M, M, B, B])[1] == pytest.approx(0.75)


def test_auc_single_class_is_undefined():
    with pytest.raises(MetricsError, match="undefined"):
        roc_auc([0.1, 0.2], [1, 1])


def test_roc_endpoints_and_ties():
    c = roc_curve([0.5, 0.5, 0.5, 0.2], [1, 0, 1, 0])
    assert (c.x[0], c.y[0], c.x[-1], c.y[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert len(c.x) == 3  # equal scores form one step
    assert roc_auc([0.5, 0.5], [1, 0])[1] == 0.5


def test_trapezoid_auc_equals_pair_counting_on_random_sets():
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # coarse rounding makes ties
        curve, auc = roc_auc(scores, labels)
        assert abs(auc - pair_auc(scores, labels)) < 1e-9
        assert np.all(np.diff(curve.y) >= 0) and np.all(np.diff(curve.x) >= 0)


def test_pr_curve():
    c = pr_curve([0.9, 0.8, 0.4, 0.3], [M, B, M, B])
    assert c.x.tolist() == [0.0, 0.5, 0.5, 1.0, 1.0]
    assert c.y.tolist() == [1.0, 1.0, 0.5, 2 / 3, 0.5]


# ---- report -----------------------------------------------------------------

def sample_rows():
    scores = np.array([0.9, 0.7, 0.6, 0.2, 0.1])
    labels = np.array([1, 1, 0, 0, 1])
    rec = compute_metrics(confusion((scores > 0.5).astype(int), labels))
    _, auc = roc_auc(scores, labels)
    return {"cnn": rec.with_auc(auc), "dsbel": rec.with_auc(0.5)}, scores, labels


def test_report_csv_round_trips_to_four_decimals():
    rows, _, _ = sample_rows()
    text = metrics_csv(rows)
    assert text.splitlines()[0] == "model,accuracy,f1,mcc,recall,precision,auc"
    back = read_metrics_csv(text)
    for name, rec in rows.items():
        for key, value in back[name].items():
            assert value == pytest.approx(getattr(rec, key), abs=5e-5)


def test_emit_report_writes_well_formed_svgs(tmp_path):
    rows, scores, labels = sample_rows()
    curves = {k: roc_curve(scores, labels) for k in rows}
    prs = {k: pr_curve(scores, labels) for k in rows}
    proj = np.random.default_rng(0).standard_normal((5, 3))
    paths = emit_report(rows, curves, prs, tmp_path, pca=(proj, labels))
    assert set(paths) == {"report.csv", "roc.svg", "pr.svg", "pca.svg"}
    for name in ("roc.svg", "pr.svg"):
        root = ET.parse(paths[name]).getroot()
        assert root.get("viewBox") == "0 0 640 480"
        assert len(root.findall(f"{SVG}polyline")) == 2
        assert len(root.findall(f"{SVG}line[@class='grid']")) == 2 * 5
    pca = ET.parse(paths["pca.svg"]).getroot()
    assert len(pca.findall(f"{SVG}circle")) == 2 * 5


def test_legend_shows_returned_auc():
    rows, scores, labels = sample_rows()
    svg = roc_svg({"cnn": roc_curve(scores, labels)}, {"cnn": rows["cnn"].auc})
    legend = [t.text for t in ET.fromstring(svg).iter(f"{SVG}text") if t.get("class") == "legend"]
    assert legend == [f"cnn (AUC={rows['cnn'].auc:.4f})"]
    assert rows["cnn"].auc == pytest.approx(4 / 6)


def test_pca_svg_pads_missing_components():
    svg = pca_svg(np.ones((3, 2)), [0, 1, 1])
    assert len(ET.fromstring(svg).findall(f"{SVG}circle")) == 6
