"""Calibration and discrimination metrics.

All functions take (N, L) class-probability arrays (rows on the
simplex) and integer labels, compute in float64, and are pure. The
confidence of a prediction is the max of its probability vector.

Conventions fixed here:
  - ECE uses M equal-width bins partitioning (0, 1]; bin m holds
    confidences in ((m-1)/M, m/M].
  - The Brier score is normalized by N*L (bounded by 2/L), not by N.
  - NLL is the categorical mean -log p_true with p clamped at 1e-12.
    The per-class binary cross-entropy variant some frameworks report
    is provided separately as a diagnostic (nll_binary_sum).
  - AUROC is the Mann-Whitney statistic with tied scores counted 1/2.
  - AUPRC integrates precision over recall by trapezoid, anchored at
    (0, precision of the lowest-recall point); no extrapolation past
    the largest observed recall.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np


def _validate(probs: np.ndarray, labels: np.ndarray) -> tuple:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise ValueError(f"probs must be (N, L), got {probs.shape}")
    n, l = probs.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} rows")
    if n == 0:
        raise ValueError("empty prediction batch")
    if labels.min() < 0 or labels.max() >= l:
        raise ValueError("label outside [0, num_classes)")
    return probs, labels.astype(np.int64), n, l


def confidence(probs: np.ndarray) -> np.ndarray:
    """Max class probability per row."""
    probs = np.asarray(probs, dtype=np.float64)
    return probs.max(axis=-1)


def ece(probs: np.ndarray, labels: np.ndarray, num_bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins."""
    probs, labels, n, _ = _validate(probs, labels)
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    # bin m (1-based) covers ((m-1)/M, m/M]
    idx = np.clip(np.ceil(conf * num_bins).astype(np.int64) - 1, 0, num_bins - 1)
    total = 0.0
    for b in range(num_bins):
        mask = idx == b
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        acc = correct[mask].mean()
        avg = conf[mask].mean()
        total += (cnt / n) * abs(acc - avg)
    return float(total)


def brier(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean squared error against the one-hot target, averaged over
    both samples and classes (so the worst case is 2/L)."""
    probs, labels, n, l = _validate(probs, labels)
    onehot = np.zeros((n, l))
    onehot[np.arange(n), labels] = 1.0
    return float(((probs - onehot) ** 2).sum() / (n * l))


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Categorical negative log-likelihood, mean over samples."""
    probs, labels, n, _ = _validate(probs, labels)
    p_true = probs[np.arange(n), labels]
    return float(-np.log(np.maximum(p_true, 1e-12)).mean())


def nll_binary_sum(probs: np.ndarray, labels: np.ndarray) -> float:
    """Diagnostic variant: per-class binary cross-entropy summed over
    classes, mean over samples (treats each output as a Bernoulli)."""
    probs, labels, n, l = _validate(probs, labels)
    onehot = np.zeros((n, l))
    onehot[np.arange(n), labels] = 1.0
    p = np.clip(probs, 1e-12, 1.0 - 1e-12)
    per_sample = -(onehot * np.log(p) + (1.0 - onehot) * np.log(1.0 - p)).sum(axis=1)
    return float(per_sample.mean())


def f1_weighted(probs: np.ndarray, labels: np.ndarray) -> float:
    """Support-weighted mean of per-class F1; empty ratios count as 0."""
    probs, labels, n, l = _validate(probs, labels)
    pred = probs.argmax(axis=1)
    total = 0.0
    for c in range(l):
        support = int((labels == c).sum())
        if support == 0:
            continue
        tp = int(((pred == c) & (labels == c)).sum())
        fp = int(((pred == c) & (labels != c)).sum())
        fn = support - tp
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2.0 * prec * rec / (prec + rec) if prec + rec else 0.0
        total += (support / n) * f1
    return float(total)


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    probs, labels, n, _ = _validate(probs, labels)
    return float((probs.argmax(axis=1) == labels).mean())


def auroc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Probability a random positive outscores a random negative
    (Mann-Whitney; ties count half). Errors on single-class input."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positives = np.asarray(positives).astype(bool).reshape(-1)
    if scores.shape != positives.shape:
        raise ValueError("scores and positives must align")
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: need both positive and negative samples")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(points) -> float:
    """Area under a precision-recall point set.

    points: iterable of (recall, precision). Integrates by trapezoid
    over recall after sorting, with a vertical anchor segment from
    recall 0 at the first point's precision; the curve ends at the
    largest observed recall.
    """
    pts = [(float(r), float(p)) for r, p in points]
    if len({r for r, _ in pts}) < 2:
        raise ValueError("AUPRC needs at least 2 distinct recall values")
    for r, p in pts:
        if not (0.0 <= r <= 1.0 and 0.0 <= p <= 1.0):
            raise ValueError(f"point ({r}, {p}) outside the unit square")
    pts.sort(key=lambda rp: rp[0])
    if pts[0][0] > 0.0:
        pts = [(0.0, pts[0][1])] + pts
    area = 0.0
    for (r0, p0), (r1, p1) in zip(pts, pts[1:]):
        area += (r1 - r0) * (p0 + p1) / 2.0
    return float(area)


@dataclass
class CalibrationReport:
    """Scalar calibration metrics plus the per-bin reliability table."""
    n: int
    num_bins: int
    f1: float
    acc: float
    ece: float
    brier: float
    nll: float
    nll_binary: float
    bins: list = field(default_factory=list)  # (lo, hi, count, acc, mean_conf)

    @classmethod
    def from_predictions(cls, probs: np.ndarray, labels: np.ndarray,
                         num_bins: int = 15) -> "CalibrationReport":
        p, y, n, _ = _validate(probs, labels)
        conf = p.max(axis=1)
        correct = (p.argmax(axis=1) == y).astype(np.float64)
        idx = np.clip(np.ceil(conf * num_bins).astype(np.int64) - 1, 0, num_bins - 1)
        bins = []
        for b in range(num_bins):
            mask = idx == b
            cnt = int(mask.sum())
            bins.append((b / num_bins, (b + 1) / num_bins, cnt,
                         float(correct[mask].mean()) if cnt else 0.0,
                         float(conf[mask].mean()) if cnt else 0.0))
        return cls(n=n, num_bins=num_bins, f1=f1_weighted(p, y), acc=accuracy(p, y),
                   ece=ece(p, y, num_bins), brier=brier(p, y), nll=nll(p, y),
                   nll_binary=nll_binary_sum(p, y), bins=bins)

    def to_dict(self) -> dict:
        return {"n": self.n, "num_bins": self.num_bins, "f1": self.f1, "acc": self.acc,
                "ece": self.ece, "brier": self.brier, "nll": self.nll,
                "nll_binary": self.nll_binary,
                "bins": [list(b) for b in self.bins]}

    def to_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def bins_to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["bin_lo", "bin_hi", "count", "accuracy", "mean_confidence"])
            for lo, hi, cnt, acc, conf in self.bins:
                wr.writerow([f"{lo:.6f}", f"{hi:.6f}", cnt, f"{acc:.6f}", f"{conf:.6f}"])
