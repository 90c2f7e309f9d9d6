import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinyfed import streams
from tinyfed.streams import SineTask, TaskDistributionConfig


def test_default_ranges():
    d = TaskDistributionConfig()
    assert d.amplitude == (0.1, 5.0) and d.frequency == (0.8, 1.2)
    assert d.phase == (0.0, math.pi) and d.x_range == (-5.0, 5.0)
    assert streams.symmetric_phase_preset().phase == (0.0, 2 * math.pi)


def test_inverted_range_rejected():
    with pytest.raises(streams.StreamError):
        TaskDistributionConfig(amplitude=(2.0, 1.0))
    with pytest.raises(streams.StreamError):
        streams.classification_preset(class_count=60)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**64 - 1))
def test_sampled_sine_tasks_in_range(seed):
    t = streams.sample_task(TaskDistributionConfig(), seed)
    assert 0.1 <= t.a <= 5.0 and 0.8 <= t.b <= 1.2 and 0.0 <= t.c <= math.pi
    assert streams.sample_task(TaskDistributionConfig(), seed) == t


def test_classification_task_draws_distinct_pool_classes():
    dist = streams.classification_preset()
    t = streams.sample_task(dist, 5)
    assert len(set(t.class_labels)) == 5
    np.testing.assert_allclose(np.linalg.norm(t.prototypes, axis=1), 1.0, rtol=1e-12)
    np.testing.assert_array_equal(t.prototypes, streams.class_pool(dist)[list(t.class_labels)])
    assert streams.sample_task(dist, 5) == t


@pytest.mark.parametrize("task,x,y", [
    (SineTask(1, 1, 0), 0.0, 0.0),
    (SineTask(1, 1, 0), math.pi / 2, 1.0),
    (SineTask(2, 1, math.pi), math.pi / 2, -2.0),
])
def test_forced_sine_points(task, x, y):
    (s,) = streams.sample_points(task, 1, xs=[x])
    assert s.has_label
    assert s.target[0] == pytest.approx(y, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 50))
def test_sine_ground_truth_is_exact(seed, n):
    task = streams.sample_task(TaskDistributionConfig(), seed)
    for s in streams.sample_points(task, n, (-5, 5), seed):
        assert -5 <= s.input[0] <= 5
        assert s.target[0] == task.a * np.sin(task.b * s.input[0] + task.c)


def test_unlabeled_sine_points():
    pts = streams.sample_points(SineTask(1, 1, 0), 3, seed=1, with_labels=False)
    assert all(not p.has_label and p.target is None for p in pts)


def test_zero_noise_classification_equals_prototypes():
    dist = streams.classification_preset(noise_sigma=0.0)
    task = streams.sample_task(dist, 3)
    for s in streams.sample_classification_batch(task, 40, seed=2):
        assert 0 <= s.target < 5
        np.testing.assert_array_equal(s.input, task.prototypes[s.target])


def test_classification_labels_are_balanced_binomially():
    task = streams.sample_task(streams.classification_preset(), 1)
    labels = [s.target for s in streams.sample_classification_batch(task, 10_000, seed=4)]
    counts = np.bincount(labels, minlength=5)
    assert np.all(np.abs(counts - 2000) <= 3 * math.sqrt(2000 * 0.8))


def test_classification_batch_is_deterministic():
    task = streams.sample_task(streams.classification_preset(), 1)
    a = streams.sample_classification_batch(task, 12, seed=9)
    b = streams.sample_classification_batch(task, 12, seed=9)
    assert [s.target for s in a] == [s.target for s in b]
    assert all(np.array_equal(x.input, y.input) for x, y in zip(a, b))


def test_client_stream_counts_shots_per_class():
    dist = streams.classification_preset()
    task = streams.sample_task(dist, 1)
    samples = streams.client_stream(dist, task, 3, seed=0)
    assert np.bincount([s.target for s in samples]).tolist() == [3] * 5


def _ids(samples):
    return {id(s) for s in samples}


def test_split_edges_and_disjointness():
    data = streams.sample_points(SineTask(1, 1, 0), 10, seed=0)
    empty = streams.split_support_query(data, 0)
    assert empty.support == [] and empty.query == data
    full = streams.split_support_query(data, 10)
    assert full.query == []
    cut = streams.split_support_query(data, 4, seed=7)
    assert len(cut.support) == 4 and len(cut.query) == 6
    assert not _ids(cut.support) & _ids(cut.query)
    assert _ids(cut.support) | _ids(cut.query) == _ids(data)
    with pytest.raises(streams.StreamError):
        streams.split_support_query(data, 11)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.data())
def test_split_disjoint_property(n, data):
    samples = streams.sample_points(SineTask(1, 1, 0), n, seed=n)
    k = data.draw(st.integers(0, n))
    seed = data.draw(st.one_of(st.none(), st.integers(0, 2**32)))
    sp = streams.split_support_query(samples, k, seed)
    assert len(sp.support) == k and len(sp.query) == n - k
    assert not _ids(sp.support) & _ids(sp.query)


def test_csv_header_only(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("x,y\n")
    assert streams.load_csv_stream(p, ["x"], "y") == []


def test_csv_rows_in_order(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("x,y\n1,10\n2,20\n3,30\n")
    out = streams.load_csv_stream(p, ["x"], "y")
    assert [(s.input[0], s.target[0], s.has_label) for s in out] == [
        (1.0, 10.0, True), (2.0, 20.0, True), (3.0, 30.0, True)]


def test_csv_without_label_column(tmp_path):
    p = tmp_path / "u.csv"
    p.write_text("a,b\n1,2\n")
    (s,) = streams.load_csv_stream(p, ["a", "b"])
    assert not s.has_label and s.input.tolist() == [1.0, 2.0]


def test_csv_malformed_row_names_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("x,y\n1,1\n2,2\n3,3\nfour,4\n")
    with pytest.raises(streams.MalformedRowError) as err:
        streams.load_csv_stream(p, ["x"], "y")
    assert err.value.line == 5
    assert "5" in str(err.value)


def test_csv_schema_errors(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("x,y\n1,2,3\n")
    with pytest.raises(streams.SchemaError):
        streams.load_csv_stream(p, ["x"], "y")
    with pytest.raises(streams.SchemaError):
        streams.load_csv_stream(p, ["z"])
