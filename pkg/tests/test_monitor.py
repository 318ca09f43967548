"""Sliding-window accuracy-drop monitoring.

Windowed means are checked against a cumulative-sum oracle, event
classification against hand-walked positions, and the pooled threshold
sweep against per-stream recomputation. The detector sanity tests plant
streams where confidence either perfectly tracks correctness or
carries no signal at all.
"""

import numpy as np
import pytest

from qutelab.data import Dataset
from qutelab.monitor import (
    DEFAULT_THRESHOLDS,
    ConfusionCounts,
    IdStats,
    StreamSeries,
    WindowState,
    accuracy_drop_auprc,
    calibrate_id_stats,
    classify_positions,
    concat_datasets,
    detect_events,
    failure_tasks,
    stream_series,
    sweep_thresholds,
    sweep_to_csv,
    window_push,
)


def moving_means(values, m):
    """Cumulative-sum oracle for the post-warm-up window means."""
    v = np.asarray(values, dtype=np.float64)
    s = np.concatenate([[0.0], np.cumsum(v)])
    return (s[m:] - s[:-m]) / m


def table_dataset(probs, labels):
    """Dataset whose images encode row indices; paired with
    table_predict the probability of sample i is probs[i] exactly."""
    n = probs.shape[0]
    images = np.zeros((n, 1, 2, 2), dtype=np.uint8)
    images[:, 0, 0, 0] = np.arange(n) % 256
    images[:, 0, 0, 1] = np.arange(n) // 256
    return Dataset(images, np.asarray(labels, dtype=np.int64), name="table")


def table_predict(probs):
    def fn(images):
        idx = images[:, 0, 0, 0].astype(np.int64) + 256 * images[:, 0, 0, 1].astype(np.int64)
        return probs[idx]
    return fn


# --- the window ----------------------------------------------------------------

def test_window_hand_walk():
    w = WindowState(3)
    assert not w.warm
    assert w.push(1.0) == 1.0
    assert w.push(2.0) == 1.5
    assert w.push(3.0) == 2.0
    assert w.warm
    assert w.push(4.0) == pytest.approx(3.0)      # window is now [2, 3, 4]
    assert window_push(w, 5.0) == pytest.approx(4.0)


def test_window_rejects_bad_length():
    with pytest.raises(ValueError):
        WindowState(0)


def test_window_mean_matches_oracle_on_long_stream():
    rng = np.random.default_rng(17)
    values = rng.random(5000)
    m = 100
    w = WindowState(m)
    got = []
    for v in values:
        mean = w.push(v)
        if w.warm:
            got.append(mean)
    np.testing.assert_allclose(np.array(got), moving_means(values, m), atol=1e-12)


def test_window_running_sum_does_not_drift():
    # adversarial magnitudes; the periodic resync keeps the running sum
    # within 1e-9 of a fresh buffer sum at every point
    rng = np.random.default_rng(23)
    m = 64
    w = WindowState(m)
    vals = np.where(rng.random(200_000) < 0.5, 1.0, 1e-8)
    worst = 0.0
    for i, v in enumerate(vals):
        mean = w.push(v)
        if i % 9973 == 0 and w.warm:
            exact = w.buf.sum() / m
            worst = max(worst, abs(mean - exact))
    assert worst < 1e-9


# --- classification ---------------------------------------------------------------

def test_id_stats_drop_threshold():
    s = IdStats(mu=0.9, sigma=0.02, m=100, n_positions=500)
    assert s.drop_threshold == pytest.approx(0.84)


def test_classify_positions_hand_example():
    series = StreamSeries(c_sw=np.array([0.5, 0.9, 0.5, 0.9]),
                          a_sw=np.array([0.80, 0.80, 0.90, 0.90]))
    stats = IdStats(mu=0.9, sigma=0.02, m=4, n_positions=4)   # threshold 0.84
    c = classify_positions(series, rho=0.7, id_stats=stats)
    assert (c.tp, c.fn, c.fp, c.tn) == (1, 1, 1, 1)
    assert c.precision == pytest.approx(0.5)
    assert c.recall == pytest.approx(0.5)


def test_confusion_degenerate_rates():
    assert ConfusionCounts(tp=0, fp=0, tn=5, fn=0).precision == 1.0
    assert ConfusionCounts(tp=0, fp=2, tn=5, fn=0).recall == 0.0
    total = ConfusionCounts(1, 2, 3, 4) + ConfusionCounts(10, 20, 30, 40)
    assert (total.tp, total.fp, total.tn, total.fn) == (11, 22, 33, 44)


# --- stream walking -----------------------------------------------------------------

def test_stream_series_matches_cumsum_oracle():
    rng = np.random.default_rng(5)
    n, L, m = 300, 4, 25
    raw = rng.random((n, L))
    probs = raw / raw.sum(axis=1, keepdims=True)
    labels = rng.integers(0, L, size=n)
    ds = table_dataset(probs, labels)
    series = stream_series(table_predict(probs), ds, m=m, batch_size=64)

    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    assert len(series) == n - m + 1
    np.testing.assert_allclose(series.c_sw, moving_means(conf, m), atol=1e-12)
    np.testing.assert_allclose(series.a_sw, moving_means(correct, m), atol=1e-12)


def test_stream_shorter_than_window_rejected():
    probs = np.full((10, 3), 1 / 3)
    ds = table_dataset(probs, np.zeros(10))
    with pytest.raises(ValueError, match="shorter than the window"):
        stream_series(table_predict(probs), ds, m=11)


def test_calibrate_id_stats_population_sigma():
    rng = np.random.default_rng(9)
    n, m = 200, 10
    probs = np.zeros((n, 2))
    correct_mask = rng.random(n) < 0.9
    labels = np.zeros(n, dtype=np.int64)
    probs[:, 0] = np.where(correct_mask, 0.8, 0.3)
    probs[:, 1] = 1.0 - probs[:, 0]
    ds = table_dataset(probs, labels)
    stats = calibrate_id_stats(table_predict(probs), ds, m=m)
    a = moving_means(correct_mask.astype(np.float64), m)
    assert stats.n_positions == n - m + 1
    assert stats.mu == pytest.approx(a.mean(), abs=1e-12)
    assert stats.sigma == pytest.approx(a.std(ddof=0), abs=1e-12)


def test_detect_events_composes_walk_and_classify():
    rng = np.random.default_rng(3)
    n, m = 120, 15
    raw = rng.random((n, 3))
    probs = raw / raw.sum(axis=1, keepdims=True)
    labels = rng.integers(0, 3, size=n)
    ds = table_dataset(probs, labels)
    stats = IdStats(mu=0.6, sigma=0.1, m=m, n_positions=1)
    direct = detect_events(table_predict(probs), ds, rho=0.5, id_stats=stats, m=m)
    series = stream_series(table_predict(probs), ds, m=m)
    expect = classify_positions(series, 0.5, stats)
    assert (direct.tp, direct.fp, direct.tn, direct.fn) == \
        (expect.tp, expect.fp, expect.tn, expect.fn)
    with pytest.raises(ValueError):
        detect_events(table_predict(probs), ds, rho=1.5, id_stats=stats, m=m)


# --- threshold sweep -----------------------------------------------------------------

def test_default_thresholds_cover_unit_interval():
    assert DEFAULT_THRESHOLDS == (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def two_streams(seed=11, n=150, m=20):
    rng = np.random.default_rng(seed)
    streams = []
    for _ in range(2):
        raw = rng.random((n, 3))
        probs = raw / raw.sum(axis=1, keepdims=True)
        labels = rng.integers(0, 3, size=n)
        streams.append((probs, table_dataset(probs, labels)))
    return streams, m


def test_sweep_pools_counts_across_streams():
    streams, m = two_streams()
    stats = IdStats(mu=0.5, sigma=0.05, m=m, n_positions=1)
    points_per_stream = []
    for probs, ds in streams:
        points_per_stream.append(
            sweep_thresholds(table_predict(probs), [ds], stats, m=m))
    # one predict_fn must cover both streams for pooling, so merge the
    # tables and re-key each dataset into its range of the merged table
    combined = np.concatenate([p for p, _ in streams])
    offset_ds = []
    k = 0
    for probs, ds in streams:
        imgs = ds.images.copy()
        idx = np.arange(k, k + len(ds))
        imgs[:, 0, 0, 0] = idx % 256
        imgs[:, 0, 0, 1] = idx // 256
        offset_ds.append(Dataset(imgs, ds.labels))
        k += len(ds)
    sweep = sweep_thresholds(table_predict(combined), offset_ds, stats, m=m)
    assert len(sweep) == 11
    for i, point in enumerate(sweep):
        a = points_per_stream[0][i].counts
        b = points_per_stream[1][i].counts
        assert point.rho == DEFAULT_THRESHOLDS[i]
        assert (point.counts.tp, point.counts.fp, point.counts.tn, point.counts.fn) == \
            (a.tp + b.tp, a.fp + b.fp, a.tn + b.tn, a.fn + b.fn)


def test_sweep_recall_monotone_in_rho():
    streams, m = two_streams(seed=2)
    probs, ds = streams[0]
    stats = IdStats(mu=0.5, sigma=0.05, m=m, n_positions=1)
    pts = sweep_thresholds(table_predict(probs), [ds], stats, m=m)
    recalls = [p.recall for p in pts]
    assert all(r2 >= r1 - 1e-12 for r1, r2 in zip(recalls, recalls[1:]))
    assert pts[0].counts.tp == 0                   # rho=0: nothing detected
    assert pts[-1].counts.fn == 0                  # rho=1: everything detected


def test_sweep_to_csv_format(tmp_path):
    streams, m = two_streams(seed=4)
    probs, ds = streams[0]
    stats = IdStats(mu=0.5, sigma=0.05, m=m, n_positions=1)
    pts = sweep_thresholds(table_predict(probs), [ds], stats, m=m)
    path = tmp_path / "sweep.csv"
    sweep_to_csv(pts, str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "rho,tp,fp,tn,fn,precision,recall"
    assert len(lines) == 12
    first = lines[1].split(",")
    assert first[0] == "0.0" and len(first) == 7


# --- stream assembly -------------------------------------------------------------------

def test_concat_datasets_order_and_validation():
    a = table_dataset(np.full((5, 2), 0.5), np.zeros(5))
    b = table_dataset(np.full((3, 2), 0.5), np.ones(3))
    ab = concat_datasets(a, b)
    assert len(ab) == 8
    np.testing.assert_array_equal(ab.images[:5], a.images)
    np.testing.assert_array_equal(ab.images[5:], b.images)
    np.testing.assert_array_equal(ab.labels, np.concatenate([a.labels, b.labels]))
    wide = Dataset(np.zeros((2, 1, 3, 3), dtype=np.uint8), np.zeros(2, dtype=np.int64))
    with pytest.raises(ValueError):
        concat_datasets(a, wide)


# --- end-to-end detector sanity -----------------------------------------------------------

def ideal_streams(seed=0, n_id=400, n_cid=400):
    """Confidence perfectly tracks correctness: high and right on ID,
    low and wrong on corrupted blocks."""
    rng = np.random.default_rng(seed)
    L = 4

    def block(n, p_correct, conf):
        probs = np.full((n, L), (1.0 - conf) / (L - 1))
        labels = rng.integers(0, L, size=n)
        correct = rng.random(n) < p_correct
        top = np.where(correct, labels, (labels + 1) % L)
        probs[np.arange(n), top] = conf
        return probs, labels

    id_probs, id_labels = block(n_id, 0.97, 0.90)
    cid1_probs, cid1_labels = block(n_cid, 0.20, 0.30)
    cid2_probs, cid2_labels = block(n_cid, 0.25, 0.35)
    return (id_probs, id_labels), (cid1_probs, cid1_labels), (cid2_probs, cid2_labels)


def assemble(blocks):
    probs = np.concatenate([b[0] for b in blocks])
    labels = np.concatenate([b[1] for b in blocks])
    return probs, labels


def test_ideal_detector_auprc_high():
    id_blk, cid1, cid2 = ideal_streams()
    m = 20
    # one flat probability table; the ID stream and each ID+CID stream
    # index disjoint row ranges of it
    all_probs, _ = assemble([id_blk, id_blk, cid1, id_blk, cid2])
    n_id = id_blk[0].shape[0]

    def make_ds(lo, blocks):
        probs, labels = assemble(blocks)
        n = probs.shape[0]
        imgs = np.zeros((n, 1, 2, 2), dtype=np.uint8)
        idx = np.arange(lo, lo + n)
        imgs[:, 0, 0, 0] = idx % 256
        imgs[:, 0, 0, 1] = idx // 256
        return Dataset(imgs, labels)

    id_ds = make_ds(0, [id_blk])
    fn = table_predict(all_probs)
    stats = calibrate_id_stats(fn, id_ds, m=m)
    assert stats.sigma > 0

    cid_by_kind = {
        "k1": make_ds(2 * n_id, [cid1]),
        "k2": make_ds(3 * n_id + cid1[0].shape[0], [cid2]),
    }
    # accuracy_drop_auprc prepends the ID block itself; give it the
    # second copy of the ID rows so indices line up
    id_for_stream = make_ds(n_id, [id_blk])
    res = accuracy_drop_auprc(fn, id_for_stream, cid_by_kind, stats, m=m)
    assert res.auprc > 0.95
    assert res.points and res.per_kind == {}


def test_uninformative_confidence_scores_low():
    # same accuracy pattern but confidence is constant: detection
    # cannot separate dropped from healthy windows
    id_blk, cid1, cid2 = ideal_streams(seed=1)
    for blk in (id_blk, cid1, cid2):
        blk[0][:] = np.sort(blk[0], axis=1)[:, ::-1]
        blk[0][:, 0] = 0.6
        blk[0][:, 1:] = 0.4 / 3.0
    m = 20
    # rebuild top-class placement so correctness still differs per block
    rng = np.random.default_rng(2)
    for probs, labels, p_c in ((id_blk[0], id_blk[1], 0.97),
                               (cid1[0], cid1[1], 0.20), (cid2[0], cid2[1], 0.25)):
        n = probs.shape[0]
        probs[:] = 0.4 / 3.0
        correct = rng.random(n) < p_c
        top = np.where(correct, labels, (labels + 1) % 4)
        probs[np.arange(n), top] = 0.6

    all_probs, _ = assemble([id_blk, id_blk, cid1, id_blk, cid2])
    n_id = id_blk[0].shape[0]

    def make_ds(lo, blocks):
        probs, labels = assemble(blocks)
        n = probs.shape[0]
        imgs = np.zeros((n, 1, 2, 2), dtype=np.uint8)
        idx = np.arange(lo, lo + n)
        imgs[:, 0, 0, 0] = idx % 256
        imgs[:, 0, 0, 1] = idx // 256
        return Dataset(imgs, labels)

    fn = table_predict(all_probs)
    stats = calibrate_id_stats(fn, make_ds(0, [id_blk]), m=m)
    cid_by_kind = {
        "k1": make_ds(2 * n_id, [cid1]),
        "k2": make_ds(3 * n_id + cid1[0].shape[0], [cid2]),
    }
    res = accuracy_drop_auprc(fn, make_ds(n_id, [id_blk]), cid_by_kind, stats, m=m)
    ideal = 0.95
    assert res.auprc < ideal - 0.1


def test_per_corruption_mode_averages_curves():
    id_blk, cid1, cid2 = ideal_streams(seed=3)
    m = 20
    all_probs, _ = assemble([id_blk, id_blk, cid1, id_blk, cid2])
    n_id = id_blk[0].shape[0]

    def make_ds(lo, blocks):
        probs, labels = assemble(blocks)
        n = probs.shape[0]
        imgs = np.zeros((n, 1, 2, 2), dtype=np.uint8)
        idx = np.arange(lo, lo + n)
        imgs[:, 0, 0, 0] = idx % 256
        imgs[:, 0, 0, 1] = idx // 256
        return Dataset(imgs, labels)

    fn = table_predict(all_probs)
    stats = calibrate_id_stats(fn, make_ds(0, [id_blk]), m=m)
    cid_by_kind = {
        "k1": make_ds(2 * n_id, [cid1]),
        "k2": make_ds(3 * n_id + cid1[0].shape[0], [cid2]),
    }
    res = accuracy_drop_auprc(fn, make_ds(n_id, [id_blk]), cid_by_kind, stats,
                              m=m, per_corruption=True)
    assert set(res.per_kind) == {"k1", "k2"}
    assert res.auprc == pytest.approx(np.mean(list(res.per_kind.values())))
    assert res.points == []


def test_accuracy_drop_requires_streams():
    stats = IdStats(mu=0.9, sigma=0.01, m=5, n_positions=1)
    ds = table_dataset(np.full((10, 2), 0.5), np.zeros(10))
    with pytest.raises(ValueError, match="no corruption"):
        accuracy_drop_auprc(lambda x: np.full((x.shape[0], 2), 0.5), ds, {}, stats, m=5)


# --- failure separations --------------------------------------------------------------------

def test_failure_tasks_hand_values():
    idcid_conf = np.array([0.9, 0.3, 0.6, 0.2])
    idcid_correct = np.array([1.0, 0.0, 1.0, 0.0])
    out = failure_tasks(idcid_conf, idcid_correct,
                        id_conf=np.array([0.9, 0.3]),
                        id_correct=np.array([1.0, 1.0]),
                        ood_conf=np.array([0.4, 0.2]))
    assert out["correct_vs_incorrect"] == pytest.approx(1.0)
    # pos {0.9, 0.3} vs ood {0.4, 0.2}: wins 3 of 4 pairs
    assert out["correct_vs_ood"] == pytest.approx(0.75)


def test_failure_tasks_without_ood():
    out = failure_tasks(np.array([0.9, 0.1]), np.array([1.0, 0.0]),
                        np.array([0.9]), np.array([1.0]), ood_conf=None)
    assert set(out) == {"correct_vs_incorrect"}
    out2 = failure_tasks(np.array([0.9, 0.1]), np.array([1.0, 0.0]),
                         np.array([0.9]), np.array([1.0]),
                         ood_conf=np.array([]))
    assert set(out2) == {"correct_vs_incorrect"}


def test_failure_auroc_shuffled_null_near_half():
    rng = np.random.default_rng(31)
    conf = rng.random(4000)
    correct = (rng.random(4000) < 0.5).astype(np.float64)
    out = failure_tasks(conf, correct, conf, correct)
    assert abs(out["correct_vs_incorrect"] - 0.5) < 0.05
