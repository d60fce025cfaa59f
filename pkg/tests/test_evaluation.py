import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import silhouette_score

from bindsep.evaluation import (
    MetricError,
    avg_final_accuracy,
    avg_forgetting,
    evaluate_task,
    export_embeddings,
    forgetting_per_task,
    metrics_report,
    read_accuracy_matrix,
    silhouette,
    write_accuracy_matrix,
)
from bindsep.model import ModelConfig, build_model


def test_avg_acc_examples():
    assert avg_final_accuracy([[0.9], [0.5, 0.7]]) == pytest.approx(0.6)
    assert avg_final_accuracy([[0.4], [0.4, 0.4]]) == pytest.approx(0.4)
    m = [[0.7], [0.6, 0.6], [0.6, 0.6, 0.6], [0.62, 0.58, 0.66, 0.54]]
    assert avg_final_accuracy(m) == pytest.approx(0.60, abs=1e-12)


def test_forgetting_examples():
    assert avg_forgetting([[0.8], [0.6, 0.7]]) == pytest.approx(0.2, abs=1e-12)
    m = [[0.9], [0.7, 0.8], [0.6, 0.9, 0.7]]
    assert forgetting_per_task(m) == pytest.approx([0.3, -0.1])
    assert avg_forgetting(m) == pytest.approx(0.1, abs=1e-12)
    assert avg_forgetting([[0.5]]) == 0.0
    assert avg_forgetting([[0.5], [0.5, 0.5]]) == 0.0


def test_forgetting_include_last():
    m = [[0.9], [0.7, 0.8], [0.6, 0.9, 0.7]]
    assert avg_forgetting(m, include_last=True) == pytest.approx(0.2 / 3)


def test_incomplete_matrix():
    with pytest.raises(MetricError, match="incomplete"):
        avg_final_accuracy([[0.5], [0.5]])
    with pytest.raises(MetricError, match="incomplete"):
        avg_forgetting([])


def _random_matrix(data, n):
    return [[data.draw(st.floats(0, 1)) for _ in range(t + 1)] for t in range(n)]


@settings(max_examples=60, deadline=None)
@given(st.data(), st.integers(2, 5))
def test_nondecreasing_columns_do_not_forget(data, n):
    m = _random_matrix(data, n)
    for j in range(n):
        for t in range(j + 1, n):
            m[t][j] = max(m[t][j], m[t - 1][j])
    assert avg_forgetting(m) <= 1e-15


@settings(max_examples=60, deadline=None)
@given(st.data(), st.integers(1, 5))
def test_metrics_bounded(data, n):
    m = _random_matrix(data, n)
    assert 0 <= avg_final_accuracy(m) <= 1
    assert -1 <= avg_forgetting(m) <= 1


def test_matrix_csv_roundtrip(tmp_path):
    m = [[0.9], [0.7, 0.8], [0.6, 0.9, 0.7]]
    write_accuracy_matrix(m, tmp_path / "m.csv", [2, 0, 1])
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["after_task", "task_2", "task_0", "task_1"]
    assert rows[1] == ["2", "0.9", "", ""]
    assert read_accuracy_matrix(tmp_path / "m.csv") == m


def test_metrics_report_fields():
    r = metrics_report([[0.8], [0.6, 0.7]], [1, 0])
    d = r.to_dict()
    assert d["avg_acc"] == pytest.approx(0.65) and d["avg_fog"] == pytest.approx(0.2)
    assert d["final_accuracies"] == [0.6, 0.7] and d["task_order"] == [1, 0]


# accuracy

def test_evaluate_index_zero_model(small_stream, monkeypatch):
    import bindsep.evaluation as ev

    split = [replace(s, gold_index=0) for s in small_stream.tasks[0].test]
    monkeypatch.setattr(ev, "score_samples", lambda p, ss: [np.array([1.0] + [0.0] * (len(s.candidates) - 1)) for s in ss])
    assert evaluate_task(None, split) == 1.0


def test_evaluate_duplicates_unchanged(small_stream):
    p = build_model(ModelConfig(), 0)
    split = small_stream.tasks[1].test
    assert evaluate_task(p, split) == evaluate_task(p, split + split)


def test_evaluate_untrained_near_chance():
    from bindsep.synthdata import TaskSpec, generate_task_stream

    task = generate_task_stream([TaskSpec("AFTER", 0, 64)], master_seed=0).tasks[0]
    accs = [evaluate_task(build_model(ModelConfig(), seed), task.test) for seed in range(5)]
    # 5 candidates, 64 samples; the mean over seeds sits within a wide binomial band
    assert 0.05 <= float(np.mean(accs)) <= 0.4


def test_evaluate_empty():
    with pytest.raises(MetricError):
        evaluate_task(build_model(ModelConfig(), 0), [])


# embeddings

def test_export_embeddings(tmp_path, small_stream):
    p = build_model(ModelConfig(), 0)
    with pytest.raises(MetricError):
        export_embeddings(p, small_stream, tmp_path / "x.csv")
    p.allocate_task(0)
    p.allocate_task(1)
    n = export_embeddings(p, small_stream, tmp_path / "e.csv")
    assert n == 2 + 8 + 8
    rows = list(csv.reader(open(tmp_path / "e.csv")))
    assert len(rows[0]) == 2 + 32
    assert [r[0] for r in rows[1:3]] == ["task_embedding"] * 2
    export_embeddings(p, small_stream, tmp_path / "f.csv")
    assert (tmp_path / "e.csv").read_bytes() == (tmp_path / "f.csv").read_bytes()


def test_export_default_stream_row_count(tmp_path):
    from bindsep.synthdata import default_specs, generate_task_stream

    s = generate_task_stream(default_specs(0, 64), master_seed=0)
    p = build_model(ModelConfig(), 0)
    for t in range(4):
        p.allocate_task(t)
    assert export_embeddings(p, s, tmp_path / "e.csv") == 4 + 256


# silhouette

def test_silhouette_separated_pairs():
    pts = [[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.0, 10.1]]
    assert silhouette(pts, [0, 0, 1, 1]) > 0.9


def test_silhouette_identical_points():
    assert silhouette(np.ones((4, 3)), [0, 1, 0, 1]) == 0.0


def test_silhouette_singletons_contribute_zero():
    pts = [[0.0], [0.1], [5.0]]
    full = silhouette(pts, [0, 0, 1])
    # the two non-singleton points score (b - a) / b; the singleton adds 0
    a = 0.1
    b0, b1 = 5.0, 4.9
    assert full == pytest.approx(((b0 - a) / b0 + (b1 - a) / b1) / 3)


def test_silhouette_errors():
    with pytest.raises(MetricError):
        silhouette([[0.0], [1.0]], [0, 0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 4))
def test_silhouette_matches_reference_and_is_label_symmetric(seed, k):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), 3)
    pts = rng.normal(size=(len(labels), 3)) + labels[:, None]
    ours = silhouette(pts, labels)
    assert ours == pytest.approx(silhouette_score(pts, labels), abs=1e-10)
    perm = rng.permutation(k)
    assert silhouette(pts, perm[labels]) == pytest.approx(ours, abs=1e-12)
