import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glom.data import kfold_split
from glom.errors import DataError, ParameterError
from glom.selection import (
    ConfusionMatrix,
    GridSpec,
    MetricsReport,
    MetricsSummary,
    compute_metrics,
    emit_report,
    format_cell,
    grid_search,
    grid_size,
    load_report,
    positive_class,
    render_table,
    select_best_model,
)
from glom.train import EpochRecord, TrainingTrace


def recount(true, pred, k, positive=None):
    """Metrics straight from the definitions, one sample at a time."""
    n = len(true)
    acc = sum(t == p for t, p in zip(true, pred)) / n

    def pr(c):
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        predicted = sum(1 for p in pred if p == c)
        actual = sum(1 for t in true if t == c)
        return (tp / predicted if predicted else 0.0), (tp / actual if actual else 0.0)

    if positive is not None:
        p, r = pr(positive)
    else:
        pairs = [pr(c) for c in range(k)]
        p, r = sum(a for a, _ in pairs) / k, sum(b for _, b in pairs) / k
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1, acc


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=60))
def test_metrics_match_recount(k, pairs):
    true = [t % k for t, _ in pairs]
    pred = [p % k for _, p in pairs]
    names = [f"c{j}" for j in range(k)]
    rep = compute_metrics(ConfusionMatrix.from_labels(true, pred, names))
    ref = recount(true, pred, k, positive=k - 1 if k == 2 else None)
    assert (rep.P, rep.R, rep.F1, rep.ACC) == pytest.approx(ref, abs=1e-12)
    assert rep.mode == ("binary" if k == 2 else "macro")


def test_lesion_is_positive_class():
    assert positive_class(["lesion", "normal"]) == 0
    assert positive_class(["a", "b"]) == 1
    cm = ConfusionMatrix.from_labels([0, 0, 1, 1], [0, 1, 1, 1], ["lesion", "normal"])
    rep = compute_metrics(cm)
    assert (rep.P, rep.R) == (1.0, 0.5)


def test_undefined_precision_is_flagged():
    rep = compute_metrics(ConfusionMatrix.from_labels([0, 0], [0, 0], ["a", "b"]))
    assert rep.P == 0.0 and "P" in rep.undefined


def test_empty_confusion_rejected():
    with pytest.raises(DataError):
        compute_metrics(ConfusionMatrix(np.zeros((2, 2)), ("a", "b")))


def test_binary_mode_needs_two_classes():
    with pytest.raises(ParameterError):
        compute_metrics(ConfusionMatrix(np.eye(3), ("a", "b", "c")), mode="binary")


def test_summary_sample_std():
    reports = [MetricsReport(1, 1, 1, a, "binary") for a in (1.0, 0.98, 1.0, 0.99)]
    s = MetricsSummary(reports)
    assert s.mean["ACC"] == pytest.approx(0.9925)
    assert s.std["ACC"] == pytest.approx(np.std([1.0, 0.98, 1.0, 0.99], ddof=1))


def test_cell_format():
    assert format_cell(0.9957, 0.0081) == "0.996 (±0.008)"
    assert format_cell(1.0, 0.0) == "1.000 (±0.000)"


@pytest.mark.parametrize("kind,size", [("linear", 6), ("rbf", 30), ("polynomial", 120), ("sigmoid", 30)])
def test_grid_sizes(kind, size):
    assert grid_size(kind) == size
    assert len({(k, c) for k in GridSpec(kind).kernels() for c in GridSpec(kind).C}) == size


def test_grid_search_cells_and_best():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(size=(20, 2)) - 2, rng.normal(size=(20, 2)) + 2])
    y = np.repeat([0, 1], 20)
    plan = kfold_split(40, 5, seed=0, labels=y)
    res = grid_search(X, y, GridSpec("rbf"), plan)
    assert len(res.cells) == 30
    assert all(len(c.fold_acc) == 5 for c in res.cells)
    assert res.best.mean_acc == max(c.mean_acc for c in res.cells)
    lin = grid_search(X, y, GridSpec("linear"), plan)
    assert lin.best.mean_acc == 1.0
    assert lin.best.C == min(c.C for c in lin.cells if c.mean_acc == 1.0)
    assert GridSpec("linear").C[0] == 0.001
    cell = next(c for c in lin.cells if c.C == 1.0)
    assert cell.row() == f"Linear, 'C': 1, {cell.mean_acc:.3f}"


def test_grid_search_parallel_matches_serial():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(30, 3)), rng.integers(0, 3, 30)
    plan = kfold_split(30, 3, seed=1, labels=y)
    a = grid_search(X, y, GridSpec("sigmoid"), plan, jobs=1).to_dict()
    b = grid_search(X, y, GridSpec("sigmoid"), plan, jobs=3).to_dict()
    assert a == b


def _trace(accs):
    return TrainingTrace([EpochRecord(i + 1, 0.0, 0.0, a) for i, a in enumerate(accs)])


def test_select_best_model_ties_go_to_lower_fold():
    traces = [_trace([0.5, 0.9]), _trace([0.95, 0.7]), _trace([0.95])]
    assert select_best_model(traces, ["a", "b", "c"]) == (1, "b")
    assert traces[1].best_epoch() == 1


def test_report_round_trip(tmp_path):
    s = MetricsSummary([MetricsReport(0.9, 0.8, 0.85, a, "binary") for a in (0.9, 1.0, 0.95)])
    paths = emit_report(s, tmp_path, "cnn-svm", best_params={"kernel": "linear", "C": 1.0})
    back, doc = load_report(paths["json"])
    assert back == s
    assert doc["split"] == "67/33" and len(doc["per_fold"]) == 3
    assert "0.950 (±0.050)" in paths["table"].read_text(encoding="utf-8")
    assert json.loads(paths["json"].read_text())["best_params"]["kernel"] == "linear"


def test_render_table_layout():
    s = MetricsSummary([MetricsReport(1, 1, 1, 1, "binary")] * 2)
    lines = render_table([("90/10", s)], title="cnn-mlp").splitlines()
    assert lines[0] == "cnn-mlp"
    assert lines[1].split() == ["Split", "μP", "μR", "μF1", "μACC"]
    assert lines[3].startswith("90/10") and lines[3].count("1.000 (±0.000)") == 4
