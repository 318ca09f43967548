"""Confidence-triggered accuracy-drop monitoring.

A deployed model's ensemble confidence is the only signal available on
device; labels exist solely inside this module's evaluation oracle. Two
sliding windows of length m move over a prediction stream: C_SW (mean
confidence) and A_SW (mean correctness). ID behaviour is summarized
once as (mu, sigma) of A_SW over all post-warm-up positions of an ID
stream; afterwards every post-warm-up position of a monitored stream is
classified against a confidence threshold rho:

  detected   C_SW <  rho
  dropped    A_SW <= mu - 3*sigma

  TP detected & dropped      FP detected & not dropped
  FN not detected & dropped  TN not detected & not dropped

Sweeping rho over 0..1 (step 0.1) and pooling counts across the
per-corruption ID+CID streams yields one precision-recall curve whose
area summarizes how well low confidence anticipates accuracy drops.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset
from .metrics import auprc, auroc


class WindowState:
    """Fixed-length sliding window with an O(1) running sum.

    The sum is recomputed from the buffer every m pushes so float drift
    can never accumulate past ~1e-9 of the true value.
    """

    def __init__(self, m: int):
        if m < 1:
            raise ValueError(f"window length must be >= 1, got {m}")
        self.m = int(m)
        self.buf = np.zeros(self.m, dtype=np.float64)
        self.count = 0
        self.pos = 0
        self.running_sum = 0.0
        self._since_resync = 0

    def push(self, value: float) -> float:
        """Insert one value; returns the mean over min(count, m) values."""
        v = float(value)
        if self.count < self.m:
            self.buf[self.pos] = v
            self.running_sum += v
            self.count += 1
        else:
            self.running_sum += v - self.buf[self.pos]
            self.buf[self.pos] = v
        self.pos = (self.pos + 1) % self.m
        self._since_resync += 1
        if self._since_resync >= self.m:
            self.running_sum = float(self.buf[: self.count].sum())
            self._since_resync = 0
        return self.running_sum / self.count

    @property
    def warm(self) -> bool:
        return self.count >= self.m


def window_push(state: WindowState, value: float) -> float:
    return state.push(value)


@dataclass
class IdStats:
    """A_SW distribution on the ID stream, post-warm-up positions only."""
    mu: float
    sigma: float
    m: int
    n_positions: int

    @property
    def drop_threshold(self) -> float:
        return self.mu - 3.0 * self.sigma


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 0.0


@dataclass
class StreamSeries:
    """Windowed views of one stream: per post-warm-up position."""
    c_sw: np.ndarray
    a_sw: np.ndarray

    def __len__(self) -> int:
        return self.c_sw.shape[0]


def _predict_conf_correct(predict_fn: Callable, ds: Dataset,
                          batch_size: int = 512) -> tuple:
    """Confidence and correctness per sample. predict_fn sees images
    only; labels stay on the oracle side of the fence."""
    n = len(ds)
    conf = np.empty(n, dtype=np.float64)
    correct = np.empty(n, dtype=np.float64)
    for lo in range(0, n, batch_size):
        probs = np.asarray(predict_fn(ds.images[lo:lo + batch_size]), dtype=np.float64)
        conf[lo:lo + probs.shape[0]] = probs.max(axis=1)
        correct[lo:lo + probs.shape[0]] = (
            probs.argmax(axis=1) == ds.labels[lo:lo + probs.shape[0]]).astype(np.float64)
    return conf, correct


def stream_series(predict_fn: Callable, ds: Dataset, m: int,
                  batch_size: int = 512) -> StreamSeries:
    """Walk the stream in order through both windows."""
    conf, correct = _predict_conf_correct(predict_fn, ds, batch_size)
    if conf.shape[0] < m:
        raise ValueError(f"stream of {conf.shape[0]} samples is shorter than the window m={m}")
    wc, wa = WindowState(m), WindowState(m)
    c_list, a_list = [], []
    for cv, av in zip(conf, correct):
        cm = wc.push(cv)
        am = wa.push(av)
        if wc.warm:
            c_list.append(cm)
            a_list.append(am)
    return StreamSeries(np.array(c_list), np.array(a_list))


def calibrate_id_stats(predict_fn: Callable, id_stream: Dataset, m: int = 100,
                       batch_size: int = 512) -> IdStats:
    """mu and (population) sigma of windowed accuracy on the ID stream."""
    series = stream_series(predict_fn, id_stream, m, batch_size)
    vals = series.a_sw
    return IdStats(mu=float(vals.mean()), sigma=float(vals.std(ddof=0)),
                   m=m, n_positions=int(vals.shape[0]))


def classify_positions(series: StreamSeries, rho: float, id_stats: IdStats) -> ConfusionCounts:
    detected = series.c_sw < rho
    dropped = series.a_sw <= id_stats.drop_threshold
    return ConfusionCounts(
        tp=int((detected & dropped).sum()),
        fp=int((detected & ~dropped).sum()),
        tn=int((~detected & ~dropped).sum()),
        fn=int((~detected & dropped).sum()),
    )


def detect_events(predict_fn: Callable, stream: Dataset, rho: float,
                  id_stats: IdStats, m: int = 100,
                  batch_size: int = 512) -> ConfusionCounts:
    """Event counts for one stream at one confidence threshold."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    return classify_positions(stream_series(predict_fn, stream, m, batch_size),
                              rho, id_stats)


DEFAULT_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class SweepPoint:
    rho: float
    counts: ConfusionCounts

    @property
    def precision(self) -> float:
        return self.counts.precision

    @property
    def recall(self) -> float:
        return self.counts.recall


def sweep_thresholds(predict_fn: Callable, streams: Sequence[Dataset],
                     id_stats: IdStats, m: int = 100,
                     thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                     batch_size: int = 512) -> list:
    """Counts pooled across streams at each threshold. Streams are each
    walked once; thresholds reuse the windowed series."""
    series = [stream_series(predict_fn, ds, m, batch_size) for ds in streams]
    points = []
    for rho in thresholds:
        total = ConfusionCounts()
        for s in series:
            total = total + classify_positions(s, rho, id_stats)
        points.append(SweepPoint(rho=float(rho), counts=total))
    return points


def sweep_to_csv(points: Sequence[SweepPoint], path: str) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["rho", "tp", "fp", "tn", "fn", "precision", "recall"])
        for p in points:
            c = p.counts
            wr.writerow([f"{p.rho:.1f}", c.tp, c.fp, c.tn, c.fn,
                         f"{p.precision:.6f}", f"{p.recall:.6f}"])


def concat_datasets(a: Dataset, b: Dataset, name: Optional[str] = None) -> Dataset:
    if a.images.shape[1:] != b.images.shape[1:]:
        raise ValueError("datasets have different image shapes")
    return Dataset(np.concatenate([a.images, b.images]),
                   np.concatenate([a.labels, b.labels]),
                   name=name or f"{a.name}+{b.name}")


@dataclass
class DriftResult:
    auprc: float
    points: list                      # pooled SweepPoints (or mean curve inputs)
    per_kind: dict = field(default_factory=dict)
    id_stats: Optional[IdStats] = None


def accuracy_drop_auprc(predict_fn: Callable, id_stream: Dataset,
                        cid_by_kind: dict, id_stats: IdStats, m: int = 100,
                        thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
                        per_corruption: bool = False,
                        batch_size: int = 512) -> DriftResult:
    """Area under precision-recall across the threshold sweep.

    Each corruption kind contributes one stream: the ID block followed
    by its corrupted-ID block. Default pools the event counts of all
    streams at each threshold into a single curve; per_corruption
    instead integrates each kind's own curve and averages the areas.
    """
    streams = {kind: concat_datasets(id_stream, cid)
               for kind, cid in cid_by_kind.items()}
    if not streams:
        raise ValueError("no corruption streams supplied")
    if per_corruption:
        per_kind = {}
        for kind, ds in streams.items():
            pts = sweep_thresholds(predict_fn, [ds], id_stats, m, thresholds, batch_size)
            per_kind[kind] = auprc([(p.recall, p.precision) for p in pts])
        value = float(np.mean(list(per_kind.values())))
        return DriftResult(auprc=value, points=[], per_kind=per_kind, id_stats=id_stats)
    pts = sweep_thresholds(predict_fn, list(streams.values()), id_stats, m,
                           thresholds, batch_size)
    value = auprc([(p.recall, p.precision) for p in pts])
    return DriftResult(auprc=value, points=pts, per_kind={}, id_stats=id_stats)


# ---------------------------------------------------------------------------
# failure-detection tasks


def failure_tasks(idcid_conf: np.ndarray, idcid_correct: np.ndarray,
                  id_conf: np.ndarray, id_correct: np.ndarray,
                  ood_conf: Optional[np.ndarray] = None) -> dict:
    """Confidence as a failure score, two separations:

    correct_vs_incorrect: correct predictions against incorrect ones,
    pooled over the ID and corrupted-ID samples.
    correct_vs_ood: correct ID predictions against an OOD set's
    confidences (present only when ood_conf is given).
    """
    out = {"correct_vs_incorrect": auroc(idcid_conf, idcid_correct.astype(bool))}
    if ood_conf is not None and ood_conf.size:
        pos = id_conf[id_correct.astype(bool)]
        scores = np.concatenate([pos, ood_conf])
        labels = np.concatenate([np.ones(pos.shape[0], dtype=bool),
                                 np.zeros(ood_conf.shape[0], dtype=bool)])
        out["correct_vs_ood"] = auroc(scores, labels)
    return out
