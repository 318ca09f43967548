"""Metric correctness against brute-force oracles and hand-worked cases.

Oracles are written per sample in plain Python (or as direct pairwise
comparisons for AUROC) so they share no code path with the vectorized
implementations. Random-batch agreement is checked to 1e-9; the larger
200-batch sweep lives in the acceptance suite.
"""

import math

import numpy as np
import pytest

from qutelab.metrics import (CalibrationReport, accuracy, auprc, auroc, brier,
                             confidence, ece, f1_weighted, nll, nll_binary_sum)


# --- oracles -------------------------------------------------------------------


def ece_oracle(probs, labels, num_bins):
    n = len(labels)
    stats = [[0, 0.0, 0.0] for _ in range(num_bins)]  # count, correct, conf sum
    for i in range(n):
        row = probs[i]
        conf = max(row)
        pred = max(range(len(row)), key=lambda c: row[c])
        b = 0
        while b < num_bins - 1 and conf > (b + 1) / num_bins:
            b += 1  # bin b covers (b/M, (b+1)/M]
        stats[b][0] += 1
        stats[b][1] += 1.0 if pred == labels[i] else 0.0
        stats[b][2] += conf
    total = 0.0
    for cnt, corr, csum in stats:
        if cnt:
            total += (cnt / n) * abs(corr / cnt - csum / cnt)
    return total


def brier_oracle(probs, labels):
    n, l = probs.shape
    s = 0.0
    for i in range(n):
        for c in range(l):
            target = 1.0 if c == labels[i] else 0.0
            s += (probs[i, c] - target) ** 2
    return s / (n * l)


def nll_oracle(probs, labels):
    return sum(-math.log(max(probs[i, labels[i]], 1e-12))
               for i in range(len(labels))) / len(labels)


def f1_oracle(probs, labels):
    n, l = probs.shape
    pred = [max(range(l), key=lambda c: probs[i, c]) for i in range(n)]
    total = 0.0
    for c in range(l):
        tp = sum(1 for i in range(n) if pred[i] == c and labels[i] == c)
        fp = sum(1 for i in range(n) if pred[i] == c and labels[i] != c)
        fn = sum(1 for i in range(n) if pred[i] != c and labels[i] == c)
        support = tp + fn
        if support == 0:
            continue
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / support
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        total += support / n * f1
    return total


def auroc_oracle(scores, positives):
    pos = scores[positives]
    neg = scores[~positives]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def auprc_oracle(points):
    pts = sorted((float(r), float(p)) for r, p in points)
    if pts[0][0] > 0:
        pts.insert(0, (0.0, pts[0][1]))
    return sum((r1 - r0) * (p0 + p1) / 2
               for (r0, p0), (r1, p1) in zip(pts, pts[1:]))


def random_batch(rng, n=None, l=None, sharp=False):
    n = n or int(rng.integers(10, 600))
    l = l or int(rng.integers(2, 12))
    raw = rng.exponential(size=(n, l))
    if sharp:
        raw = raw ** 4  # push mass toward confident rows
    probs = raw / raw.sum(axis=1, keepdims=True)
    labels = rng.integers(0, l, size=n)
    return probs, labels


# --- random-batch agreement ------------------------------------------------------


def test_prob_metrics_match_oracles_on_random_batches(rng_np):
    for trial in range(40):
        probs, labels = random_batch(rng_np, sharp=trial % 2 == 0)
        bins = int(rng_np.integers(1, 25))
        assert abs(ece(probs, labels, bins) - ece_oracle(probs, labels, bins)) < 1e-9
        assert abs(brier(probs, labels) - brier_oracle(probs, labels)) < 1e-9
        assert abs(nll(probs, labels) - nll_oracle(probs, labels)) < 1e-9
        assert abs(f1_weighted(probs, labels) - f1_oracle(probs, labels)) < 1e-9


def test_auroc_matches_pairwise_oracle(rng_np):
    for trial in range(40):
        n = int(rng_np.integers(10, 300))
        # quantized scores force plenty of ties
        scores = np.round(rng_np.random(n), 2 if trial % 2 else 6)
        positives = rng_np.random(n) < 0.4
        if positives.all() or not positives.any():
            continue
        got = auroc(scores, positives)
        assert abs(got - auroc_oracle(scores, positives)) < 1e-9


def test_auprc_matches_oracle(rng_np):
    for _ in range(40):
        k = int(rng_np.integers(2, 30))
        recalls = np.unique(rng_np.random(k))
        if recalls.size < 2:
            continue
        precisions = rng_np.random(recalls.size)
        pts = list(zip(recalls, precisions))
        assert abs(auprc(pts) - auprc_oracle(pts)) < 1e-9


# --- hand-worked values -------------------------------------------------------------


def test_f1_weighted_hand_example():
    # labels [0,0,1,2], preds [0,1,1,2]:
    # class0 f1=2/3 (support 2), class1 f1=2/3 (support 1), class2 f1=1
    probs = np.array([[.9, .05, .05], [.1, .8, .1], [.2, .7, .1], [.05, .05, .9]])
    labels = np.array([0, 0, 1, 2])
    assert f1_weighted(probs, labels) == pytest.approx(
        0.5 * (2 / 3) + 0.25 * (2 / 3) + 0.25 * 1.0, abs=1e-12)


def test_nll_and_brier_uniform_prediction():
    l = 4
    probs = np.full((8, l), 1.0 / l)
    labels = np.arange(8) % l
    assert nll(probs, labels) == pytest.approx(math.log(l), abs=1e-12)
    assert brier(probs, labels) == pytest.approx((l - 1) / l**2, abs=1e-12)


def test_perfect_predictions():
    probs = np.eye(5)[np.array([0, 2, 4])]
    labels = np.array([0, 2, 4])
    assert brier(probs, labels) == 0.0
    assert f1_weighted(probs, labels) == 1.0
    assert accuracy(probs, labels) == 1.0
    assert ece(probs, labels, 10) == pytest.approx(0.0, abs=1e-12)
    assert nll(probs, labels) == pytest.approx(0.0, abs=1e-9)


def test_ece_hand_example():
    # two bins of one sample each with M=2: both fall in (0.5, 1.0] bin
    # conf .9 correct, conf .7 wrong -> bin acc .5, bin conf .8, ece = .3
    probs = np.array([[.9, .1], [.7, .3]])
    labels = np.array([0, 1])
    assert ece(probs, labels, num_bins=2) == pytest.approx(0.3, abs=1e-12)


def test_ece_bin_edges_closed_on_the_right():
    # conf exactly 0.5 with M=2 belongs to the lower bin (0, .5]
    probs = np.array([[.5, .5]])
    labels = np.array([0])
    rep = CalibrationReport.from_predictions(probs, labels, num_bins=2)
    counts = [b[2] for b in rep.bins]
    assert counts == [1, 0]


def test_auroc_known_values():
    scores = np.array([.1, .2, .3, .4])
    assert auroc(scores, np.array([0, 0, 1, 1], bool)) == 1.0
    assert auroc(scores, np.array([1, 1, 0, 0], bool)) == 0.0
    assert auroc(np.ones(6), np.array([1, 0, 1, 0, 1, 0], bool)) == 0.5
    # pos {.2,.3} vs neg {.2,.1}: three clear wins plus one tie at .2
    got = auroc(np.array([.2, .3, .2, .1]), np.array([1, 1, 0, 0], bool))
    assert got == pytest.approx(3.5 / 4, abs=1e-12)


def test_auroc_requires_both_classes():
    with pytest.raises(ValueError):
        auroc(np.array([1.0, 2.0]), np.array([1, 1], bool))


def test_auprc_known_values():
    # flat precision 0.8 over recall 0..1 -> 0.8
    assert auprc([(0.0, 0.8), (1.0, 0.8)]) == pytest.approx(0.8, abs=1e-12)
    # anchor: first point at recall .5 extends its precision back to 0
    assert auprc([(0.5, 1.0), (1.0, 0.0)]) == pytest.approx(0.75, abs=1e-12)
    with pytest.raises(ValueError):
        auprc([(0.3, 0.5)])
    with pytest.raises(ValueError):
        auprc([(0.0, 1.2), (1.0, 0.5)])


def test_validation_errors():
    good = np.full((3, 4), 0.25)
    with pytest.raises(ValueError):
        nll(good, np.array([0, 1]))          # length mismatch
    with pytest.raises(ValueError):
        nll(good[0], np.array([0]))          # not 2-d
    with pytest.raises(ValueError):
        nll(good, np.array([0, 1, 4]))       # label out of range
    with pytest.raises(ValueError):
        nll(np.zeros((0, 4)), np.zeros(0, dtype=int))  # empty
    with pytest.raises(ValueError):
        ece(good, np.array([0, 1, 2]), num_bins=0)


def test_confidence_and_binary_nll():
    probs = np.array([[.6, .4], [.1, .9]])
    np.testing.assert_allclose(confidence(probs), [.6, .9])
    labels = np.array([0, 1])
    want = (-(math.log(.6) + math.log(.6)) - (math.log(.9) + math.log(.9))) / 2
    assert nll_binary_sum(probs, labels) == pytest.approx(want, abs=1e-12)


def test_report_consistent_with_scalar_metrics(rng_np):
    probs, labels = random_batch(rng_np, n=200, l=6)
    rep = CalibrationReport.from_predictions(probs, labels, num_bins=12)
    assert rep.ece == pytest.approx(ece(probs, labels, 12), abs=1e-12)
    assert rep.nll == pytest.approx(nll(probs, labels), abs=1e-12)
    assert rep.f1 == pytest.approx(f1_weighted(probs, labels), abs=1e-12)
    assert sum(b[2] for b in rep.bins) == 200
    # weighted bin gap reproduces ece
    recomputed = sum(b[2] / rep.n * abs(b[3] - b[4]) for b in rep.bins if b[2])
    assert recomputed == pytest.approx(rep.ece, abs=1e-12)


def test_report_csv_format(tmp_path, rng_np):
    probs, labels = random_batch(rng_np, n=50, l=3)
    rep = CalibrationReport.from_predictions(probs, labels, num_bins=5)
    path = tmp_path / "bins.csv"
    rep.bins_to_csv(str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "bin_lo,bin_hi,count,accuracy,mean_confidence"
    assert len(lines) == 6
    assert lines[1].startswith("0.000000,0.200000,")
