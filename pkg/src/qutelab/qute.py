"""Early-view ensemble training and prediction.

The idea: train K early exits (EEs) at intermediate trunk depths, keep
K lightweight early-view (EV) heads at full depth, and before every
training batch copy each EE's depthwise-conv weights into its partner
EV head. The EEs and the original output head are scaffolding — they
are stripped for deployment — while the EV heads, each biased toward a
different effective depth by the transfer, form a K-member ensemble
read out in a single forward pass.

Loss: sum_k tau_k * CE(EE_k) + sum_k w_ev_k * CE(EV_k) + CE(FINAL),
with tau_k the exit's relative depth and w_ev_k an arithmetic ramp
(w_ev0, w_ev0 + delta, ...). For the final 10% of epochs the trunk is
frozen while heads continue to train and transfer continues.

The same train() drives every method here: with no EE/EV exits and unit
weight on FINAL it is plain single-exit training, so the baseline uses
the identical update sequence by construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import graph as G
from . import tensor as T
from .data import augment_batch, to_model_input
from .graph import ExitSpec, NetworkGraph, build_graph, forward_all_exits
from .models import ee_exit, ev_exit, final_exit, tau_for_locations
from .rng import Rng


@dataclass
class LossWeights:
    """Per-exit loss weights: tau entries pair with EE exits in order,
    w_ev entries with EV exits (an arithmetic ramp when built through
    for_locations). A head-only ensemble uses tau with an empty w_ev."""
    tau: list          # one per EE, its relative depth in (0, 1)
    w_ev: list         # one per EV
    final: float = 1.0

    def __post_init__(self):
        for t in self.tau:
            if not 0.0 < t <= 1.0:
                raise ValueError(f"tau values must lie in (0, 1], got {t}")

    @classmethod
    def for_locations(cls, locations: Sequence[int], num_stages: int,
                      w_ev0: float = 3.0, delta: float = 0.5) -> "LossWeights":
        k = len(locations)
        return cls(tau=tau_for_locations(locations, num_stages),
                   w_ev=[w_ev0 + delta * i for i in range(k)])


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    lr_decay: float = 0.99
    freeze_fraction: float = 0.10
    val_fraction: float = 0.10
    augment: bool = False
    max_rotate_deg: float = 15.0
    max_translate_px: float = 2.0


@dataclass
class TrainLog:
    """Per-epoch rows (epoch, exit, split, loss, accuracy), the per-step
    EV/EE/FINAL batch losses, and the instrumentation needed to verify
    the protocol: one transfer record per batch, and the epoch at which
    the trunk froze."""
    epoch_rows: list = field(default_factory=list)
    batch_rows: list = field(default_factory=list)     # (step, exit, loss)
    transfer_steps: list = field(default_factory=list)  # global step of each transfer
    freeze_start_epoch: Optional[int] = None
    train_size: int = 0
    val_size: int = 0

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["epoch", "exit", "split", "loss", "accuracy"])
            for row in self.epoch_rows:
                wr.writerow([row[0], row[1], row[2], f"{row[3]:.6f}", f"{row[4]:.6f}"])

    def batch_losses(self, exit_name: str) -> np.ndarray:
        return np.array([loss for _, name, loss in self.batch_rows if name == exit_name])


def attach_qute_heads(trunk: list, stage_ends: list, locations: Sequence[int],
                      input_shape: tuple, num_classes: int, rng: Rng,
                      trunk_channels: int) -> NetworkGraph:
    """Build the full training graph: K EEs at the given stage indices
    (1-based, strictly increasing, all before the last stage), K partner
    EVs after the last stage, plus the original FINAL head."""
    num_stages = len(stage_ends)
    k = len(locations)
    if k < 1:
        raise ValueError("need at least one exit location")
    if k > num_stages - 1:
        raise ValueError(f"K={k} exits need K <= {num_stages - 1} for a {num_stages}-stage trunk")
    if list(locations) != sorted(set(locations)):
        raise ValueError(f"locations must be strictly increasing, got {list(locations)}")
    if locations[0] < 1 or locations[-1] >= num_stages:
        raise ValueError(f"locations must lie in [1, {num_stages - 1}], got {list(locations)}")
    exits: list[ExitSpec] = []
    for i, loc in enumerate(locations, start=1):
        exits.append(ee_exit(i, stage_ends[loc - 1], num_classes, trunk_channels))
    for i in range(1, k + 1):
        exits.append(ev_exit(i, stage_ends[-1], num_classes))
    exits.append(final_exit(stage_ends[-1], num_classes))
    return build_graph(trunk, exits, input_shape, num_classes, rng)


def transfer_pairs(graph: NetworkGraph) -> list:
    """(EE depthwise param names, EV depthwise param names) per pair."""
    pairs = []
    for e in graph.exits:
        if e.kind == "EE" and e.partner is not None:
            ev = graph.get_exit(e.partner)
            if ev.kind != "EV":
                raise G.GraphError(f"EE {e.name!r} partner {e.partner!r} is not an EV exit")
            pairs.append(((f"{e.name}.dw.w", f"{e.name}.dw.b"),
                          (f"{ev.name}.dw.w", f"{ev.name}.dw.b")))
    return pairs


def ev_weight_transfer(graph: NetworkGraph) -> int:
    """Copy each EE's depthwise layer (kernel and bias) into its partner
    EV head, EE -> EV only, bit-exact. Only the depthwise layer moves;
    every other EV parameter trains independently. Returns pair count."""
    pairs = transfer_pairs(graph)
    for (ee_w, ee_b), (ev_w, ev_b) in pairs:
        src_w, src_b = graph.params[ee_w], graph.params[ee_b]
        dst_w, dst_b = graph.params[ev_w], graph.params[ev_b]
        if src_w.data.shape != dst_w.data.shape:
            raise G.GraphError(
                f"transfer shape mismatch {ee_w} {src_w.data.shape} -> {ev_w} {dst_w.data.shape}")
        dst_w.data = src_w.data.copy()
        dst_b.data = src_b.data.copy()
    return len(pairs)


def qute_loss(probs: dict, labels: np.ndarray, weights: LossWeights,
              ee_names: Sequence[str], ev_names: Sequence[str],
              final_name: str = "final") -> T.Tensor:
    """Weighted sum of per-exit cross-entropies."""
    if len(ee_names) != len(weights.tau) or len(ev_names) != len(weights.w_ev):
        raise ValueError("weights do not match the exit lists")
    total = T.scale(T.cross_entropy(probs[final_name], labels), weights.final)
    for name, tau in zip(ee_names, weights.tau):
        total = total + T.scale(T.cross_entropy(probs[name], labels), tau)
    for name, w in zip(ev_names, weights.w_ev):
        total = total + T.scale(T.cross_entropy(probs[name], labels), w)
    return total


def val_split_indices(n: int, val_fraction: float, rng: Rng) -> tuple:
    """(val_idx, train_idx) from the rng's first permutation draw.

    train() takes its split through this helper, so a caller holding the
    same seed and stream can recover the exact validation rows after the
    fact (temperature fitting needs them)."""
    order = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return order[:n_val], order[n_val:]


def freeze_start_epoch(epochs: int, freeze_fraction: float) -> int:
    """First epoch (0-indexed) of the frozen-trunk tail."""
    if not 0.0 <= freeze_fraction < 1.0:
        raise ValueError(f"freeze_fraction must be in [0, 1), got {freeze_fraction}")
    if freeze_fraction == 0.0:
        return epochs  # never reached
    return math.ceil((1.0 - freeze_fraction) * epochs)


def _eval_exit_stats(graph: NetworkGraph, images: np.ndarray, labels: np.ndarray,
                     batch_size: int = 512) -> dict:
    """Per-exit (loss, accuracy) on a split, eval mode."""
    n = images.shape[0]
    sums = {name: [0.0, 0] for name in graph.exit_names()}
    for lo in range(0, n, batch_size):
        x = to_model_input(images[lo:lo + batch_size])
        y = labels[lo:lo + batch_size]
        outs = forward_all_exits(graph, x, mode="eval")
        for name, p in outs.items():
            probs = p.data
            idx = np.arange(y.shape[0])
            nll = -np.log(np.maximum(probs[idx, y], 1e-12)).sum()
            sums[name][0] += float(nll)
            sums[name][1] += int((probs.argmax(axis=1) == y).sum())
    return {name: (s / n, hits / n) for name, (s, hits) in sums.items()}


def train(graph: NetworkGraph, train_images: np.ndarray, train_labels: np.ndarray,
          cfg: TrainConfig, rng: Rng, weights: Optional[LossWeights] = None,
          log_batches: bool = True, transfer: bool = True) -> TrainLog:
    """The one training loop.

    Per batch: transfer EE depthwise weights into EV partners (when the
    graph has such pairs — transfer keeps running through the frozen
    tail), forward every exit, apply the weighted loss, one Adam step on
    the decayed learning rate. The validation split is carved from the
    head of a seed-fixed permutation before training starts.

    transfer=False trains the identical architecture with the copy step
    disabled (the assistance ablation); everything else is unchanged.
    """
    n = train_images.shape[0]
    if n < 2:
        raise ValueError("need at least 2 training samples")
    ee_names = graph.exit_names("EE")
    ev_names = graph.exit_names("EV")
    has_pairs = transfer and bool(transfer_pairs(graph))
    if weights is None:
        if ee_names or ev_names:
            raise ValueError("graph has EE/EV exits but no loss weights were given")
        weights = LossWeights(tau=[], w_ev=[])

    val_idx, tr_idx = val_split_indices(n, cfg.val_fraction, rng)
    val_x, val_y = train_images[val_idx], train_labels[val_idx]
    tr_x, tr_y = train_images[tr_idx], train_labels[tr_idx]
    n_tr, n_val = tr_x.shape[0], val_x.shape[0]

    log = TrainLog(train_size=n_tr, val_size=n_val)
    fstart = freeze_start_epoch(cfg.epochs, cfg.freeze_fraction)
    params = graph.param_list()
    step = 0
    for epoch in range(cfg.epochs):
        if epoch == fstart:
            graph.set_trunk_trainable(False)
            log.freeze_start_epoch = epoch
        lr = T.lr_schedule(cfg.lr, cfg.lr_decay, epoch)
        perm = rng.permutation(n_tr)
        for lo in range(0, n_tr, cfg.batch_size):
            sel = perm[lo:lo + cfg.batch_size]
            xb = tr_x[sel]
            yb = tr_y[sel]
            if cfg.augment:
                xb = augment_batch(xb, rng, cfg.max_rotate_deg, cfg.max_translate_px)
            step += 1
            if has_pairs:
                ev_weight_transfer(graph)
                log.transfer_steps.append(step)
            outs = forward_all_exits(graph, to_model_input(xb), mode="train", rng=rng)
            loss = qute_loss(outs, yb, weights, ee_names, ev_names)
            T.zero_grad(params)
            loss.backward()
            T.adam_step(params, lr=lr, t=step)
            if log_batches:
                for name in ev_names:
                    log.batch_rows.append((step, name, float(
                        -np.log(np.maximum(outs[name].data[np.arange(yb.shape[0]), yb], 1e-12)).mean())))
                log.batch_rows.append((step, "total", loss.item()))
        if n_val > 0:
            stats = _eval_exit_stats(graph, val_x, val_y)
            for name, (l, a) in sorted(stats.items()):
                log.epoch_rows.append((epoch, name, "val", l, a))
        tr_stats_batch = _eval_exit_stats(graph, tr_x[:min(n_tr, 2048)], tr_y[:min(n_tr, 2048)])
        for name, (l, a) in sorted(tr_stats_batch.items()):
            log.epoch_rows.append((epoch, name, "train", l, a))
    return log


def strip_for_inference(graph: NetworkGraph) -> NetworkGraph:
    """Deployment graph: trunk plus the surviving exits (the EV heads
    when present), parameters bit-copied, scaffolding dropped."""
    keep = graph.deployed_exit_names()
    exits = []
    for name in keep:
        e = graph.get_exit(name)
        exits.append(ExitSpec(name=e.name, kind=e.kind, attach_after=e.attach_after,
                              head=[G.BlockSpec(b.kind, b.name, dict(b.hyper)) for b in e.head],
                              partner=None))
    trunk = [G.BlockSpec(b.kind, b.name, dict(b.hyper)) for b in graph.trunk]
    out = build_graph(trunk, exits, graph.input_shape, graph.num_classes, init=False)
    for k in out._param_order:
        out.params[k].data = graph.params[k].data.copy()
    return out


@dataclass
class EnsemblePrediction:
    """Batched ensemble readout. member_probs is (N, K, L) in member
    order; mean_probs its arithmetic mean; confidence the max of the
    mean; predicted its argmax."""
    member_probs: np.ndarray
    mean_probs: np.ndarray
    confidence: np.ndarray
    predicted: np.ndarray
    members: list

    def __len__(self) -> int:
        return self.mean_probs.shape[0]


def ensemble_predict(graph: NetworkGraph, images: np.ndarray,
                     exits: Optional[Sequence[str]] = None,
                     batch_size: int = 512) -> EnsemblePrediction:
    """Single forward pass; members are the requested exits (default:
    the graph's deployed exits). Mean of member softmax vectors is the
    ensemble distribution; confidence is its max."""
    members = list(exits) if exits is not None else graph.deployed_exit_names()
    if not members:
        raise ValueError("no exits to predict from")
    n = images.shape[0]
    l = graph.num_classes
    mp = np.empty((n, len(members), l), dtype=np.float32)
    for lo in range(0, n, batch_size):
        x = to_model_input(images[lo:lo + batch_size])
        outs = forward_all_exits(graph, x, mode="eval")
        for j, name in enumerate(members):
            mp[lo:lo + x.shape[0], j] = outs[name].data
    mean = mp.mean(axis=1, dtype=np.float64).astype(np.float32)
    return EnsemblePrediction(member_probs=mp, mean_probs=mean,
                              confidence=mean.max(axis=1),
                              predicted=mean.argmax(axis=1).astype(np.int64),
                              members=members)


def qute_predict(stripped_graph: NetworkGraph, images: np.ndarray,
                 batch_size: int = 512) -> EnsemblePrediction:
    """Ensemble readout over the EV heads of a stripped graph."""
    evs = stripped_graph.exit_names("EV")
    if not evs:
        raise ValueError("graph has no EV exits; strip_for_inference a trained "
                         "early-view graph first")
    return ensemble_predict(stripped_graph, images, exits=evs, batch_size=batch_size)
