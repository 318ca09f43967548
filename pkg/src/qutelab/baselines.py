"""Reference methods the early-view ensemble is compared against.

  BASE          the plain single-exit network
  DEEP          K independently trained BASE copies, averaged
  MCD           one BASE network with dropout at the exit locations,
                K stochastic forward passes averaged
  EE-ensemble   K early exits kept at inference and averaged together
                with the final head (K+1 members)

plus post-hoc temperature scaling, applied pool-then-calibrate for
ensembles: member logits are averaged first, then one scalar
temperature is fit on validation NLL.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import to_model_input
from .graph import (NetworkGraph, build_graph, forward_all_exits, forward_logits,
                    load_checkpoint, save_checkpoint)
from .models import build_trunk, ee_ensemble_exit, final_exit, tau_for_locations
from .qute import (EnsemblePrediction, LossWeights, TrainConfig, TrainLog,
                   ensemble_predict, train)
from .rng import Rng


def base_graph(widths: Sequence[int], input_shape: tuple, num_classes: int,
               rng: Rng, dropout_stages: Sequence[int] = (),
               dropout_rate: float = 0.0) -> NetworkGraph:
    """Plain trunk + FINAL head. dropout_stages/rate add the dropout
    blocks the Monte-Carlo baseline samples through."""
    trunk, ends, _ = build_trunk(widths, dropout_stages=dropout_stages,
                                 dropout_rate=dropout_rate)
    return build_graph(trunk, [final_exit(ends[-1], num_classes)], input_shape,
                       num_classes, rng)


def train_base(graph: NetworkGraph, images: np.ndarray, labels: np.ndarray,
               cfg: TrainConfig, rng: Rng) -> TrainLog:
    """Single-exit training: the shared loop with unit weight on FINAL."""
    return train(graph, images, labels, cfg, rng)


# ---------------------------------------------------------------------------
# deep ensembles


@dataclass
class EnsembleOfGraphs:
    members: list
    seeds: list
    kind: str = "deep"
    meta: dict = field(default_factory=dict)

    def save(self, dirpath: str) -> None:
        os.makedirs(dirpath, exist_ok=True)
        names = []
        for i, g in enumerate(self.members):
            name = f"member_{i:02d}.ckpt"
            save_checkpoint(g, os.path.join(dirpath, name))
            names.append(name)
        with open(os.path.join(dirpath, "ensemble.json"), "w") as f:
            json.dump({"kind": self.kind, "seeds": list(self.seeds),
                       "members": names, "meta": self.meta}, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, dirpath: str) -> "EnsembleOfGraphs":
        with open(os.path.join(dirpath, "ensemble.json")) as f:
            man = json.load(f)
        members = [load_checkpoint(os.path.join(dirpath, name)) for name in man["members"]]
        return cls(members=members, seeds=man["seeds"], kind=man["kind"],
                   meta=man.get("meta", {}))


def train_deep(build_fn: Callable[[Rng], NetworkGraph], images: np.ndarray,
               labels: np.ndarray, cfg: TrainConfig, seeds: Sequence[int],
               workers: int = 1) -> EnsembleOfGraphs:
    """K independent trainings. Each member gets its own seed and its
    own rng streams (init and loop), so members never share randomness
    and the result is identical whether members run sequentially or on
    a worker pool."""
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"member seeds must be distinct, got {seeds}")
    if not seeds:
        raise ValueError("need at least one member seed")

    def run(seed: int) -> NetworkGraph:
        g = build_fn(Rng(seed, stream_id=1))
        train(g, images, labels, cfg, Rng(seed, stream_id=2), log_batches=False)
        return g

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            members = list(pool.map(run, seeds))
    else:
        members = [run(s) for s in seeds]
    return EnsembleOfGraphs(members=members, seeds=seeds, kind="deep")


def deep_predict(ens: EnsembleOfGraphs, images: np.ndarray,
                 batch_size: int = 512) -> EnsemblePrediction:
    """Arithmetic mean of the members' FINAL softmax outputs."""
    n = images.shape[0]
    k = len(ens.members)
    l = ens.members[0].num_classes
    mp = np.empty((n, k, l), dtype=np.float32)
    for j, g in enumerate(ens.members):
        pred = ensemble_predict(g, images, exits=["final"], batch_size=batch_size)
        mp[:, j] = pred.member_probs[:, 0]
    mean = mp.mean(axis=1, dtype=np.float64).astype(np.float32)
    return EnsemblePrediction(member_probs=mp, mean_probs=mean,
                              confidence=mean.max(axis=1),
                              predicted=mean.argmax(axis=1).astype(np.int64),
                              members=[f"member{j}" for j in range(k)])


# ---------------------------------------------------------------------------
# Monte-Carlo dropout


def mcd_predict(graph: NetworkGraph, images: np.ndarray, k: int, rate: float,
                rng: Optional[Rng] = None, batch_size: int = 512) -> EnsemblePrediction:
    """K forward passes with dropout live at the given rate, averaged.
    rate 0 degenerates to K identical deterministic passes."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if k < 1:
        raise ValueError("need k >= 1 passes")
    if rng is None:
        rng = Rng(0, stream_id=5)
    n = images.shape[0]
    l = graph.num_classes
    mp = np.empty((n, k, l), dtype=np.float32)
    for pass_i in range(k):
        for lo in range(0, n, batch_size):
            x = to_model_input(images[lo:lo + batch_size])
            outs = forward_all_exits(graph, x, mode="eval_mc", rng=rng,
                                     dropout_rate_override=rate)
            mp[lo:lo + x.shape[0], pass_i] = outs["final"].data
    mean = mp.mean(axis=1, dtype=np.float64).astype(np.float32)
    return EnsemblePrediction(member_probs=mp, mean_probs=mean,
                              confidence=mean.max(axis=1),
                              predicted=mean.argmax(axis=1).astype(np.int64),
                              members=[f"pass{j}" for j in range(k)])


# ---------------------------------------------------------------------------
# early-exit ensemble


def ee_ensemble_graph(widths: Sequence[int], locations: Sequence[int],
                      input_shape: tuple, num_classes: int, rng: Rng,
                      hidden_width: int = 64) -> NetworkGraph:
    """Trunk with K feed-forward exit heads kept at inference, plus the
    final head: a (K+1)-member single-pass ensemble."""
    trunk, ends, _ = build_trunk(widths)
    num_stages = len(ends)
    if not locations or list(locations) != sorted(set(locations)):
        raise ValueError(f"locations must be strictly increasing, got {list(locations)}")
    if locations[0] < 1 or locations[-1] >= num_stages:
        raise ValueError(f"locations must lie in [1, {num_stages - 1}]")
    exits = [ee_ensemble_exit(i, ends[loc - 1], num_classes, hidden_width)
             for i, loc in enumerate(locations, start=1)]
    exits.append(final_exit(ends[-1], num_classes))
    return build_graph(trunk, exits, input_shape, num_classes, rng)


def train_ee_ensemble(graph: NetworkGraph, images: np.ndarray, labels: np.ndarray,
                      cfg: TrainConfig, rng: Rng, locations: Sequence[int],
                      num_stages: int) -> TrainLog:
    """Relative-depth weights on the exits, unit weight on FINAL, no
    weight transfer (the exits have no partners)."""
    weights = LossWeights(tau=tau_for_locations(locations, num_stages), w_ev=[])
    return train(graph, images, labels, cfg, rng, weights=weights)


def ee_predict(graph: NetworkGraph, images: np.ndarray, include_final: bool = True,
               batch_size: int = 512) -> EnsemblePrediction:
    exits = graph.exit_names("EE") + (["final"] if include_final else [])
    return ensemble_predict(graph, images, exits=exits, batch_size=batch_size)


# ---------------------------------------------------------------------------
# temperature scaling


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / T). T > 1 softens, T < 1 sharpens; argmax is
    invariant either way."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return softmax_np(np.asarray(logits, dtype=np.float64) / temperature)


def _nll_at(logits: np.ndarray, labels: np.ndarray, t: float) -> float:
    p = apply_temperature(logits, t)
    idx = np.arange(labels.shape[0])
    return float(-np.log(np.maximum(p[idx, labels], 1e-12)).mean())


def fit_temperature(logits: np.ndarray, labels: np.ndarray, t_lo: float = 0.05,
                    t_hi: float = 20.0, tol: float = 1e-4) -> float:
    """Golden-section search for the NLL-minimizing temperature.

    The identity temperature is always a candidate, so the fitted value
    never scores worse than unscaled logits on the split it was fit on.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = t_lo, t_hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = _nll_at(logits, labels, c), _nll_at(logits, labels, d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = _nll_at(logits, labels, c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = _nll_at(logits, labels, d)
    t_star = (a + b) / 2.0
    candidates = [(t_star, _nll_at(logits, labels, t_star))]
    if t_lo <= 1.0 <= t_hi:
        candidates.append((1.0, _nll_at(logits, labels, 1.0)))
    candidates.sort(key=lambda tv: tv[1])
    return float(candidates[0][0])


def pooled_logits(graph: NetworkGraph, images: np.ndarray,
                  exits: Optional[Sequence[str]] = None,
                  batch_size: int = 512) -> np.ndarray:
    """Mean of member logits (pre-softmax) over the graph's deployed
    exits — the pool-then-calibrate input."""
    members = list(exits) if exits is not None else graph.deployed_exit_names()
    n = images.shape[0]
    out = np.zeros((n, graph.num_classes), dtype=np.float64)
    for lo in range(0, n, batch_size):
        x = to_model_input(images[lo:lo + batch_size])
        logit_map = forward_logits(graph, x)
        stack = np.stack([logit_map[m] for m in members])
        out[lo:lo + x.shape[0]] = stack.mean(axis=0)
    return out


def predict_with_temperature(graph: NetworkGraph, images: np.ndarray,
                             temperature: float,
                             exits: Optional[Sequence[str]] = None,
                             batch_size: int = 512) -> np.ndarray:
    """(N, L) probabilities from temperature-scaled pooled logits."""
    return apply_temperature(pooled_logits(graph, images, exits, batch_size), temperature)
