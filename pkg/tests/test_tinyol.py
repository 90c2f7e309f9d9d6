import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinyfed import nncore, streams, tinyol
from tinyfed.nncore import NetworkConfig, ParameterVector
from tinyfed.streams import Sample

SINE_NET = NetworkConfig((1, 32, 32, 1))


def _identity_base():
    cfg = NetworkConfig((1, 1))
    return ParameterVector(np.array([1.0, 0.0]), cfg.manifest), cfg


def _set_head(head, w, b):
    head.params.values[:] = np.concatenate([np.ravel(w), np.ravel(b)])
    return head


# --- heads ----------------------------------------------------------------

def test_attach_shapes():
    base = nncore.init_network(SINE_NET, 0)
    rep = tinyol.attach_head(base, SINE_NET, "replace_last_layer", 1, 0)
    app = tinyol.attach_head(base, SINE_NET, "append_new_layer", 1, 0)
    assert rep.weights.shape == (32, 1) and app.weights.shape == (1, 1)
    assert not rep.bias.any() and not app.bias.any()


def test_attach_is_deterministic_and_validates():
    base = nncore.init_network(SINE_NET, 0)
    a = tinyol.attach_head(base, SINE_NET, "replace_last_layer", 3, 5)
    b = tinyol.attach_head(base, SINE_NET, "replace_last_layer", 3, 5)
    assert a.params.values.tobytes() == b.params.values.tobytes()
    with pytest.raises(nncore.ConfigurationError):
        tinyol.attach_head(base, SINE_NET, "replace_last_layer", 0, 5)


# --- running statistics ---------------------------------------------------------

def test_first_sample_stats():
    s = tinyol.update_running_stats(tinyol.RunningStats(), [5.0])
    assert s.count == 1 and s.mean.tolist() == [5.0] and s.variance.tolist() == [0.0]


def test_three_sample_stats_against_two_pass():
    s = tinyol.RunningStats()
    for v in (1.0, 2.0, 3.0):
        s = tinyol.update_running_stats(s, [v])
    assert s.mean[0] == pytest.approx(2.0, rel=1e-15)
    assert s.variance[0] == pytest.approx(np.var([1.0, 2.0, 3.0]), rel=1e-15)
    assert s.variance[0] == pytest.approx(2 / 3, rel=1e-15)


def test_constant_stream_has_zero_variance():
    s = tinyol.RunningStats()
    for _ in range(100):
        s = tinyol.update_running_stats(s, [4.0])
    assert abs(s.variance[0]) <= 1e-12


def test_stats_dimension_mismatch():
    s = tinyol.update_running_stats(tinyol.RunningStats(), [1.0, 2.0])
    with pytest.raises(nncore.DimensionError):
        tinyol.update_running_stats(s, [1.0])


def test_update_is_pure():
    s = tinyol.update_running_stats(tinyol.RunningStats(), [1.0])
    t = tinyol.update_running_stats(s, [3.0])
    assert s.count == 1 and s.mean.tolist() == [1.0] and t.count == 2


@settings(max_examples=80, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=1, max_size=60))
def test_welford_matches_two_pass(rows):
    data = np.array(rows)
    s = tinyol.RunningStats()
    for r in data:
        s = tinyol.update_running_stats(s, r)
    np.testing.assert_allclose(s.mean, data.mean(axis=0), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(s.variance, data.var(axis=0), rtol=1e-9, atol=1e-7)


def test_scale_input_cases():
    s = tinyol.RunningStats(1, np.array([2.0]), np.array([4.0]))  # mean 2, variance 4
    assert tinyol.scale_input(s, [4.0])[0] == pytest.approx(2 / math.sqrt(4 + 1e-8), rel=1e-15)
    assert tinyol.scale_input(s, [2.0]).tolist() == [0.0]
    zero = tinyol.RunningStats(1, np.array([1.0]), np.array([0.0]))
    out = tinyol.scale_input(zero, [3.0])
    assert np.isfinite(out).all() and out[0] == pytest.approx(2 / math.sqrt(1e-8))
    with pytest.raises(tinyol.EmptyStatsError, match="unscaled"):
        tinyol.scale_input(tinyol.RunningStats(), [1.0])


# --- process_stream --------------------------------------------------------------

def test_unlabeled_stream_touches_stats_only():
    base = nncore.init_network(SINE_NET, 1)
    head = tinyol.attach_head(base, SINE_NET, "replace_last_layer", 1, 1)
    stream = streams.sample_points(streams.SineTask(1, 1, 0), 25, seed=0, with_labels=False)
    h, s, m = tinyol.process_stream(base, SINE_NET, head, tinyol.RunningStats(),
                                    tinyol.PrequentialMetrics(), stream)
    assert h.params.values.tobytes() == head.params.values.tobytes()
    assert m.labeled_count == 0 and s.count == 25


def test_metrics_record_pre_update_loss_by_hand():
    base, cfg = _identity_base()
    head = _set_head(tinyol.attach_head(base, cfg, "append_new_layer", 1, 0), 0.5, 0.0)
    stream = [Sample(np.array([1.0]), np.array([2.0])), Sample(np.array([3.0]), np.array([0.0]))]
    seen = []
    h, s, m = tinyol.process_stream(base, cfg, head, tinyol.RunningStats(),
                                    tinyol.PrequentialMetrics(), stream, learning_rate=0.1,
                                    observer=lambda i, p, loss: seen.append(loss))
    # sample 1: scaled feature 0, prediction = bias 0, loss (0-2)^2 = 4;
    # the update moves the bias to 0 - 0.1 * 2 * (0 - 2) = 0.4
    # sample 2: mean 2, variance 1 => scaled ~1, prediction ~0.5 + 0.4, loss ~0.81
    s2 = 1 / math.sqrt(1 + 1e-8)
    assert seen[0] == 4.0
    assert seen[1] == pytest.approx((0.5 * s2 + 0.4) ** 2, rel=1e-12)
    assert m.cumulative_loss == pytest.approx(seen[0] + seen[1], rel=1e-15)
    assert head.bias[0] == 0.0  # caller's head is untouched


def test_zero_learning_rate_freezes_head():
    base = nncore.init_network(SINE_NET, 1)
    head = tinyol.attach_head(base, SINE_NET, "replace_last_layer", 1, 1, learning_rate=0.0)
    stream = streams.sample_points(streams.SineTask(2, 1, 0), 40, seed=3)
    h, _, m = tinyol.process_stream(base, SINE_NET, head, tinyol.RunningStats(),
                                    tinyol.PrequentialMetrics(), stream)
    assert h.params.values.tobytes() == head.params.values.tobytes()
    assert m.labeled_count == 40 and m.cumulative_loss > 0


def test_window_holds_min_capacity_count():
    m = tinyol.PrequentialMetrics(capacity=4)
    for i in range(1, 7):
        m.record(float(i))
        assert m.window_fill == min(4, i)
    assert m.windowed_loss == pytest.approx((3 + 4 + 5 + 6) / 4)
    assert m.mean_loss == pytest.approx(3.5)


def test_classification_stream_counts_correct_predictions():
    dist = streams.classification_preset(noise_sigma=0.05)
    task = streams.sample_task(dist, 2)
    cfg = NetworkConfig((16, 16, 5), "relu", "softmax")
    base = nncore.init_network(cfg, 0)
    head = tinyol.attach_head(base, cfg, "replace_last_layer", 5, 0, learning_rate=0.1)
    stream = streams.sample_classification_batch(task, 300, seed=1)
    h, s, m = tinyol.process_stream(base, cfg, head, tinyol.RunningStats(),
                                    tinyol.PrequentialMetrics(), stream)
    assert 0 <= m.correct <= 300 and m.accuracy > 0.5
    late = [tinyol.predict(base, cfg, h, s, x.input).argmax() == x.target
            for x in streams.sample_classification_batch(task, 50, seed=2)]
    assert np.mean(late) > 0.8


def test_engine_state_size_is_constant():
    base = nncore.init_network(SINE_NET, 1)
    head = tinyol.attach_head(base, SINE_NET, "replace_last_layer", 1, 1)
    sizes = []
    h, s, m = head, tinyol.RunningStats(), tinyol.PrequentialMetrics()
    for chunk in range(4):
        stream = streams.sample_points(streams.SineTask(1, 1, 0), 50, seed=chunk)
        h, s, m = tinyol.process_stream(base, SINE_NET, h, s, m, stream)
        sizes.append(tinyol.engine_nbytes(h, s, m))
    assert len(set(sizes)) == 1


def test_engine_checkpoint_round_trip():
    base = nncore.init_network(SINE_NET, 1)
    head = tinyol.attach_head(base, SINE_NET, "replace_last_layer", 1, 1)
    stream = streams.sample_points(streams.SineTask(1, 1, 0), 30, seed=0)
    h, s, _ = tinyol.process_stream(base, SINE_NET, head, tinyol.RunningStats(),
                                    tinyol.PrequentialMetrics(), stream)
    blob = tinyol.encode_engine(base, SINE_NET, h, s)
    assert blob[:4] == b"TOLS"
    b2, cfg2, h2, s2 = tinyol.decode_engine(blob)
    assert cfg2 == SINE_NET and h2.mode == h.mode
    np.testing.assert_array_equal(b2.values, base.values.astype(np.float32))
    np.testing.assert_array_equal(h2.params.values, h.params.values.astype(np.float32))
    assert s2.count == s.count
    np.testing.assert_array_equal(s2.mean, s.mean)
    np.testing.assert_array_equal(s2.m2, s.m2)
    with pytest.raises(nncore.CheckpointError):
        tinyol.decode_engine(b"NOPE" + blob[4:])


# --- KNN baseline ----------------------------------------------------------

def _knn(k, points, labels):
    head = tinyol.KnnHead(k)
    for p, lab in zip(points, labels):
        head = tinyol.knn_fit(head, p, lab)
    return head


def test_knn_exact_match():
    head = _knn(1, [[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]], [3, 1, 2])
    assert tinyol.knn_predict(head, [1.0, 1.0]) == 1


def test_knn_majority_by_hand():
    head = _knn(3, [[1.0], [2.0], [3.0], [10.0]], [0, 0, 1, 1])
    assert tinyol.knn_predict(head, [0.0]) == 0


def test_knn_equidistant_tie_goes_to_lower_label():
    head = _knn(2, [[1.0], [-1.0]], [4, 2])
    assert tinyol.knn_predict(head, [0.0]) == 2


def test_knn_vote_tie_goes_to_smaller_mean_distance():
    # k=4: label 7 at distances 1 and 4, label 3 at distances 2 and 3.5 -> means 2.5 vs 2.75
    head = _knn(4, [[1.0], [4.0], [2.0], [3.5]], [7, 7, 3, 3])
    assert tinyol.knn_predict(head, [0.0]) == 7


def test_knn_errors_and_growth():
    with pytest.raises(tinyol.EmptyStoreError):
        tinyol.knn_predict(tinyol.KnnHead(1), [0.0])
    head = _knn(3, [[0.0], [1.0]], [0, 1])
    with pytest.raises(tinyol.EmptyStoreError):
        tinyol.knn_predict(head, [0.0])
    before = len(head)
    tinyol.knn_fit(head, [2.0], 1)
    assert len(head) == before + 1


# --- drift demo helpers ----------------------------------------------------

def test_perturb_task_magnitudes():
    rng = np.random.default_rng(0)
    t = streams.SineTask(2.0, 1.0, 0.3)
    for _ in range(10):
        p = tinyol.perturb_task(t, tinyol.DriftSpec(0.2, 0.5), rng)
        assert p.a in (pytest.approx(2.4), pytest.approx(1.6))
        assert abs(abs(p.c - 0.3) - 0.5) < 1e-12 and p.b == 1.0


def test_drift_trial_frozen_base_is_bitwise_unchanged():
    base = tinyol.train_base(SINE_NET, streams.SineTask(1.5, 1.0, 0.2), 0, steps=50)
    snapshot = base.values.tobytes()
    res = tinyol.drift_trial(0, stream_length=100, base=base)
    assert base.values.tobytes() == snapshot
    assert res.frozen_losses.shape == res.tinyol_losses.shape == (100,)
