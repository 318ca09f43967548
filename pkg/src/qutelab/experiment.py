"""Config-driven experiment orchestration.

A config names a dataset, a method, the seeds, and which evaluations to
run: calibration on the ID test set, accuracy-drop detection over
corruption streams, failure detection against an OOD set. run_experiment
trains one model per seed (or loads it from a cache keyed by the config
hash), evaluates, aggregates mean/stddev across seeds, and writes the
report tables. Every float lands in the CSVs through a fixed-width
format, so the same config reproduces byte-identical reports.

Methods:

  base         trunk + FINAL, confidence = max softmax
  qute         trunk + EE/EV heads, per-batch weight transfer, deployed
               ensemble = EV heads (arch.weight_transfer=false trains
               the identical graph with the copy step disabled)
  deep         independently trained trunks, mean of FINAL softmaxes
  mcd          trunk with dropout at the exit stages, K stochastic passes
  ee_ensemble  feed-forward exit heads kept at inference, plus FINAL

The optional temperature flag adds a pool-then-calibrate pass: mean
member logits, temperature fit on the training-time validation split.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import __version__ as _pkg_version
from .baselines import (EnsembleOfGraphs, base_graph, deep_predict, ee_ensemble_graph,
                        ee_predict, fit_temperature, mcd_predict, pooled_logits,
                        predict_with_temperature, train_deep, train_ee_ensemble)
from .data import (DataError, Dataset, SEVERITY_TABLES, build_cid_dataset, corrupt_dataset,
                   fashion_available, load_fashion_mnist, load_mnist, mnist_available,
                   resolve_data_dir, synth_dataset, synth_ood_dataset)
from .graph import NetworkGraph, load_checkpoint, save_checkpoint
from .metrics import CalibrationReport, nll as nll_metric
from .monitor import (IdStats, accuracy_drop_auprc, calibrate_id_stats, concat_datasets,
                      failure_tasks, sweep_to_csv)
from .qute import (LossWeights, TrainConfig, TrainLog, attach_qute_heads, qute_predict,
                   strip_for_inference, train, val_split_indices)
from .models import build_trunk
from .rng import Rng, derive_seed


class ConfigError(ValueError):
    """Config rejected; the message starts with the dotted field path."""


METHODS = ("base", "qute", "deep", "mcd", "ee_ensemble")
CORRUPTION_KINDS = tuple(sorted(SEVERITY_TABLES.keys()))

# rng stream/nonce conventions for this module (init=1 and loop=2 belong
# to the training entry points)
_DEEP_MEMBER_NONCE = 7001
_MCD_EVAL_STREAM = 5


@dataclass
class ExperimentConfig:
    name: str
    dataset: str
    method: str
    seeds: list
    temperature: bool
    arch: dict
    train: dict
    mcd: dict
    deep: dict
    synth: dict
    corruptions: dict
    monitor: dict
    eval: dict
    out_dir: Optional[str] = None

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                           lr_decay=t["lr_decay"], freeze_fraction=t["freeze_fraction"],
                           val_fraction=t["val_fraction"], augment=t["augment"],
                           max_rotate_deg=t["max_rotate_deg"],
                           max_translate_px=t["max_translate_px"])

    def loss_weights(self) -> LossWeights:
        return LossWeights.for_locations(self.arch["locations"], len(self.arch["widths"]),
                                         w_ev0=self.train["w_ev0"], delta=self.train["delta"])

    def canonical(self) -> dict:
        """The hashed view: everything except output locations."""
        return {"name": self.name, "dataset": self.dataset, "method": self.method,
                "seeds": list(self.seeds), "temperature": self.temperature,
                "arch": dict(self.arch), "train": dict(self.train), "mcd": dict(self.mcd),
                "deep": dict(self.deep), "synth": dict(self.synth),
                "corruptions": dict(self.corruptions), "monitor": dict(self.monitor),
                "eval": dict(self.eval)}


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.canonical(), sort_keys=True, separators=(",", ":"))
    h = hashlib.sha256((blob + "|" + _pkg_version).encode("utf-8")).hexdigest()
    return h[:16]


def train_hash(cfg: ExperimentConfig) -> str:
    """Hash of the fields that determine the trained weights, nothing else.

    Eval-time settings (temperature fitting, corruption streams, monitor
    windows, report flags) don't touch training, so two configs that differ
    only there share checkpoints.
    """
    view = {"dataset": cfg.dataset, "method": cfg.method,
            "arch": dict(cfg.arch), "train": dict(cfg.train),
            "deep": dict(cfg.deep),
            "synth": dict(cfg.synth) if cfg.dataset == "synth" else None}
    blob = json.dumps(view, sort_keys=True, separators=(",", ":"))
    h = hashlib.sha256((blob + "|" + _pkg_version).encode("utf-8")).hexdigest()
    return h[:16]


# ---------------------------------------------------------------------------
# validation

def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def _check_keys(d: dict, allowed, path: str) -> None:
    for k in d:
        if k not in allowed:
            _fail(f"{path}.{k}" if path else k, "unknown key")


def _get(d, key, default, path, kind, lo=None, hi=None):
    v = d.get(key, default)
    if kind is bool:
        if not isinstance(v, bool):
            _fail(f"{path}.{key}", f"expected bool, got {v!r}")
    elif kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            _fail(f"{path}.{key}", f"expected int, got {v!r}")
    elif kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            _fail(f"{path}.{key}", f"expected number, got {v!r}")
        v = float(v)
    elif kind is str:
        if not isinstance(v, str):
            _fail(f"{path}.{key}", f"expected string, got {v!r}")
    if lo is not None and v < lo:
        _fail(f"{path}.{key}", f"must be >= {lo}, got {v}")
    if hi is not None and v > hi:
        _fail(f"{path}.{key}", f"must be <= {hi}, got {v}")
    return v


def _get_int_list(d, key, default, path, lo=None):
    v = d.get(key, list(default))
    if not isinstance(v, list) or not v or any(isinstance(x, bool) or not isinstance(x, int)
                                               for x in v):
        _fail(f"{path}.{key}", f"expected a non-empty list of ints, got {v!r}")
    if lo is not None and any(x < lo for x in v):
        _fail(f"{path}.{key}", f"entries must be >= {lo}, got {v}")
    return list(v)


_TOP_KEYS = ("name", "dataset", "method", "seeds", "temperature", "arch", "train",
             "mcd", "deep", "synth", "corruptions", "monitor", "eval", "out_dir")


def parse_config_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root: expected a JSON object")
    _check_keys(raw, _TOP_KEYS, "")

    dataset = _get(raw, "dataset", None, "", str)
    if dataset not in ("synth", "mnist"):
        _fail("dataset", f"expected 'synth' or 'mnist', got {dataset!r}")
    method = _get(raw, "method", None, "", str)
    if method not in METHODS:
        _fail("method", f"unknown method {method!r}; choose from {list(METHODS)}")
    seeds = _get_int_list(raw, "seeds", [7], "", lo=0)
    if len(set(seeds)) != len(seeds):
        _fail("seeds", f"must be distinct, got {seeds}")

    arch_in = raw.get("arch", {})
    if not isinstance(arch_in, dict):
        _fail("arch", "expected an object")
    _check_keys(arch_in, ("widths", "locations", "hidden_width", "dropout_rate",
                          "weight_transfer"), "arch")
    widths = _get_int_list(arch_in, "widths", [8, 16, 24, 24], "arch", lo=1)
    if len(widths) < 2:
        _fail("arch.widths", f"need at least 2 stages, got {widths}")
    locations = _get_int_list(arch_in, "locations", [1, 2], "arch", lo=1)
    if locations != sorted(set(locations)) or locations[-1] >= len(widths):
        _fail("arch.locations", f"must be strictly increasing and < {len(widths)}, got {locations}")
    arch = {"widths": widths, "locations": locations,
            "hidden_width": _get(arch_in, "hidden_width", 64, "arch", int, lo=0),
            "dropout_rate": _get(arch_in, "dropout_rate", 0.1, "arch", float, lo=0.0, hi=0.95),
            "weight_transfer": _get(arch_in, "weight_transfer", True, "arch", bool)}

    tr_in = raw.get("train", {})
    if not isinstance(tr_in, dict):
        _fail("train", "expected an object")
    _check_keys(tr_in, ("epochs", "batch_size", "lr", "lr_decay", "freeze_fraction",
                        "val_fraction", "augment", "w_ev0", "delta", "max_rotate_deg",
                        "max_translate_px"), "train")
    train_d = {"epochs": _get(tr_in, "epochs", 20, "train", int, lo=1),
               "batch_size": _get(tr_in, "batch_size", 256, "train", int, lo=1),
               "lr": _get(tr_in, "lr", 1e-3, "train", float, lo=1e-8),
               "lr_decay": _get(tr_in, "lr_decay", 0.99, "train", float, lo=1e-6, hi=1.0),
               "freeze_fraction": _get(tr_in, "freeze_fraction", 0.10, "train", float,
                                       lo=0.0, hi=0.999),
               "val_fraction": _get(tr_in, "val_fraction", 0.10, "train", float,
                                    lo=0.0, hi=0.9),
               "augment": _get(tr_in, "augment", False, "train", bool),
               "w_ev0": _get(tr_in, "w_ev0", 3.0, "train", float, lo=0.0),
               "delta": _get(tr_in, "delta", 0.5, "train", float),
               "max_rotate_deg": _get(tr_in, "max_rotate_deg", 15.0, "train", float, lo=0.0),
               "max_translate_px": _get(tr_in, "max_translate_px", 2.0, "train", float, lo=0.0)}

    mcd_in = raw.get("mcd", {})
    if not isinstance(mcd_in, dict):
        _fail("mcd", "expected an object")
    _check_keys(mcd_in, ("passes",), "mcd")
    mcd_d = {"passes": _get(mcd_in, "passes", len(locations), "mcd", int, lo=1)}

    deep_in = raw.get("deep", {})
    if not isinstance(deep_in, dict):
        _fail("deep", "expected an object")
    _check_keys(deep_in, ("members",), "deep")
    deep_d = {"members": _get(deep_in, "members", len(locations), "deep", int, lo=1)}

    sy_in = raw.get("synth", {})
    if not isinstance(sy_in, dict):
        _fail("synth", "expected an object")
    _check_keys(sy_in, ("train_n", "test_n", "jitter", "noise", "classes", "seed"), "synth")
    synth_d = {"train_n": _get(sy_in, "train_n", 4000, "synth", int, lo=16),
               "test_n": _get(sy_in, "test_n", 2000, "synth", int, lo=16),
               "jitter": _get(sy_in, "jitter", 1.0, "synth", float, lo=0.0),
               "noise": _get(sy_in, "noise", 10.0, "synth", float, lo=0.0),
               "classes": _get(sy_in, "classes", 10, "synth", int, lo=2, hi=10),
               "seed": _get(sy_in, "seed", 0, "synth", int, lo=0)}

    co_in = raw.get("corruptions", {})
    if not isinstance(co_in, dict):
        _fail("corruptions", "expected an object")
    _check_keys(co_in, ("kinds", "mode", "severity", "p", "seed"), "corruptions")
    kinds = co_in.get("kinds", list(CORRUPTION_KINDS))
    if not isinstance(kinds, list) or not kinds:
        _fail("corruptions.kinds", f"expected a non-empty list, got {kinds!r}")
    for k in kinds:
        if k not in SEVERITY_TABLES:
            _fail("corruptions.kinds", f"unknown corruption {k!r}")
    mode = _get(co_in, "mode", "cid", "corruptions", str)
    if mode not in ("cid", "fixed"):
        _fail("corruptions.mode", f"expected 'cid' or 'fixed', got {mode!r}")
    corr_d = {"kinds": list(kinds), "mode": mode,
              "severity": _get(co_in, "severity", 3, "corruptions", int, lo=1, hi=5),
              "p": _get(co_in, "p", 40, "corruptions", int, lo=1),
              "seed": _get(co_in, "seed", 0, "corruptions", int, lo=0)}

    mo_in = raw.get("monitor", {})
    if not isinstance(mo_in, dict):
        _fail("monitor", "expected an object")
    _check_keys(mo_in, ("m", "id_stream_n", "per_corruption"), "monitor")
    mon_d = {"m": _get(mo_in, "m", 100, "monitor", int, lo=2),
             "id_stream_n": _get(mo_in, "id_stream_n", 2000, "monitor", int, lo=10),
             "per_corruption": _get(mo_in, "per_corruption", False, "monitor", bool)}

    ev_in = raw.get("eval", {})
    if not isinstance(ev_in, dict):
        _fail("eval", "expected an object")
    _check_keys(ev_in, ("bins", "drift", "failure"), "eval")
    eval_d = {"bins": _get(ev_in, "bins", 15, "eval", int, lo=2),
              "drift": _get(ev_in, "drift", False, "eval", bool),
              "failure": _get(ev_in, "failure", False, "eval", bool)}

    temperature = _get(raw, "temperature", False, "", bool)
    if temperature and method == "deep":
        _fail("temperature", "pool-then-calibrate is wired for single-graph methods only")

    name = _get(raw, "name", f"{method}-{dataset}", "", str)
    out_dir = raw.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        _fail("out_dir", f"expected string, got {out_dir!r}")
    return ExperimentConfig(name=name, dataset=dataset, method=method, seeds=seeds,
                            temperature=temperature,
                            arch=arch, train=train_d, mcd=mcd_d, deep=deep_d,
                            synth=synth_d, corruptions=corr_d, monitor=mon_d,
                            eval=eval_d, out_dir=out_dir)


def parse_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"config file: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: invalid JSON ({e})") from e
    return parse_config_dict(raw)


# ---------------------------------------------------------------------------
# datasets

def load_datasets(cfg: ExperimentConfig, data_dir: Optional[str] = None) -> dict:
    """train/test Datasets plus the OOD set when failure detection is on."""
    need_ood = cfg.eval["failure"]
    if cfg.dataset == "synth":
        s = cfg.synth
        out = {"train": synth_dataset(s["train_n"], classes=s["classes"],
                                      seed=derive_seed(s["seed"], 1), jitter=s["jitter"],
                                      noise=s["noise"]),
               "test": synth_dataset(s["test_n"], classes=s["classes"],
                                     seed=derive_seed(s["seed"], 2), jitter=s["jitter"],
                                     noise=s["noise"])}
        if need_ood:
            out["ood"] = synth_ood_dataset(s["test_n"], seed=derive_seed(s["seed"], 3))
        return out
    root = resolve_data_dir(data_dir)
    if not mnist_available(root):
        raise DataError("MNIST IDX files not found; pass --data-dir or set QUTELAB_DATA_DIR")
    out = {"train": load_mnist(root, "train"), "test": load_mnist(root, "test")}
    if need_ood:
        if not fashion_available(root):
            raise DataError("FashionMNIST IDX files (the OOD set) not found in the data dir")
        out["ood"] = load_fashion_mnist(root, "test")
    return out


def corruption_streams(cfg: ExperimentConfig, id_block: Dataset) -> dict:
    """kind -> corrupted block. cid mode draws p per severity from the
    block; fixed mode corrupts the whole block at one severity."""
    c = cfg.corruptions
    out = {}
    for i, kind in enumerate(c["kinds"]):
        kind_seed = derive_seed(c["seed"], 17, i)
        if c["mode"] == "cid":
            out[kind] = build_cid_dataset(id_block, kind, c["p"], kind_seed)
        else:
            out[kind] = corrupt_dataset(id_block, kind, c["severity"], kind_seed)
    return out


# ---------------------------------------------------------------------------
# per-method train / predict

def _deep_member_seeds(seed: int, members: int) -> list:
    return [derive_seed(seed, _DEEP_MEMBER_NONCE, j) for j in range(members)]


def train_for_config(cfg: ExperimentConfig, train_ds: Dataset, seed: int):
    """(model, TrainLog or None). model is a NetworkGraph, or an
    EnsembleOfGraphs for deep."""
    tcfg = cfg.train_config()
    in_shape = train_ds.images.shape[1:]
    classes = int(train_ds.labels.max()) + 1
    widths = cfg.arch["widths"]
    if cfg.method == "base":
        g = base_graph(widths, in_shape, classes, Rng(seed, 1))
        return g, train(g, train_ds.images, train_ds.labels, tcfg, Rng(seed, 2))
    if cfg.method == "qute":
        trunk, ends, last_w = build_trunk(widths)
        g = attach_qute_heads(trunk, ends, cfg.arch["locations"], in_shape, classes,
                              Rng(seed, 1), last_w)
        log = train(g, train_ds.images, train_ds.labels, tcfg, Rng(seed, 2),
                    weights=cfg.loss_weights(), transfer=cfg.arch["weight_transfer"])
        return g, log
    if cfg.method == "mcd":
        g = base_graph(widths, in_shape, classes, Rng(seed, 1),
                       dropout_stages=cfg.arch["locations"],
                       dropout_rate=cfg.arch["dropout_rate"])
        return g, train(g, train_ds.images, train_ds.labels, tcfg, Rng(seed, 2))
    if cfg.method == "deep":
        ens = train_deep(lambda r: base_graph(widths, in_shape, classes, r),
                         train_ds.images, train_ds.labels, tcfg,
                         _deep_member_seeds(seed, cfg.deep["members"]))
        return ens, None
    if cfg.method == "ee_ensemble":
        g = ee_ensemble_graph(widths, cfg.arch["locations"], in_shape, classes,
                              Rng(seed, 1), hidden_width=cfg.arch["hidden_width"])
        log = train_ee_ensemble(g, train_ds.images, train_ds.labels, tcfg, Rng(seed, 2),
                                cfg.arch["locations"], len(widths))
        return g, log
    raise ConfigError(f"method: unknown method {cfg.method!r}")


def predictor_for(cfg: ExperimentConfig, model, seed: int) -> Callable:
    """images -> (N, L) mean probabilities, deterministic per content.

    The MCD path derives its dropout rng from the batch bytes, so the
    prediction is a pure function of the input regardless of how callers
    batch the stream."""
    if cfg.method == "base":
        return lambda imgs: _graph_probs(model, imgs, ["final"])
    if cfg.method == "qute":
        stripped = strip_for_inference(model)
        return lambda imgs: qute_predict(stripped, imgs).mean_probs
    if cfg.method == "deep":
        return lambda imgs: deep_predict(model, imgs).mean_probs
    if cfg.method == "ee_ensemble":
        return lambda imgs: ee_predict(model, imgs, include_final=True).mean_probs
    if cfg.method == "mcd":
        rate = cfg.arch["dropout_rate"]
        passes = cfg.mcd["passes"]

        def run(imgs):
            digest = hashlib.sha256(np.ascontiguousarray(imgs).tobytes()).digest()
            nonce = int.from_bytes(digest[:8], "little")
            rng = Rng(derive_seed(seed, nonce), stream_id=_MCD_EVAL_STREAM)
            return mcd_predict(model, imgs, passes, rate, rng=rng).mean_probs
        return run
    raise ConfigError(f"method: unknown method {cfg.method!r}")


def _graph_probs(graph: NetworkGraph, imgs, exits):
    from .qute import ensemble_predict
    return ensemble_predict(graph, imgs, exits=exits).mean_probs


# ---------------------------------------------------------------------------
# checkpoint cache

def _seed_cache_dir(cache_dir: str, h: str, seed: int) -> str:
    return os.path.join(cache_dir, h, f"seed{seed}")


def _cache_load(cfg: ExperimentConfig, cdir: str):
    marker = os.path.join(cdir, "done.json")
    if not os.path.exists(marker):
        return None
    if cfg.method == "deep":
        return EnsembleOfGraphs.load(os.path.join(cdir, "ensemble"))
    return load_checkpoint(os.path.join(cdir, "model.ckpt"))


def _cache_store(cfg: ExperimentConfig, cdir: str, model, log: Optional[TrainLog]) -> None:
    os.makedirs(cdir, exist_ok=True)
    if cfg.method == "deep":
        model.save(os.path.join(cdir, "ensemble"))
    else:
        save_checkpoint(model, os.path.join(cdir, "model.ckpt"))
    if log is not None:
        log.to_csv(os.path.join(cdir, "train_log.csv"))
        _write_trace_csv(log, os.path.join(cdir, "ev_trace.csv"))
    with open(os.path.join(cdir, "done.json"), "w") as f:
        json.dump({"method": cfg.method, "version": _pkg_version}, f)
        f.write("\n")


def _write_trace_csv(log: TrainLog, path: str) -> None:
    import csv as _csv
    with open(path, "w", newline="") as f:
        wr = _csv.writer(f)
        wr.writerow(["step", "exit", "loss"])
        for step, name, loss in log.batch_rows:
            wr.writerow([step, name, f"{loss:.6f}"])


# ---------------------------------------------------------------------------
# the run

@dataclass
class RunManifest:
    name: str
    config_hash: str
    version: str
    method: str
    dataset: str
    seeds: list
    checkpoints: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    results: dict = field(default_factory=dict)
    wall_clock_sec: float = 0.0
    complete: bool = False

    def to_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump({"name": self.name, "config_hash": self.config_hash,
                       "version": self.version, "method": self.method,
                       "dataset": self.dataset, "seeds": self.seeds,
                       "checkpoints": self.checkpoints, "artifacts": self.artifacts,
                       "wall_clock_sec": self.wall_clock_sec, "complete": self.complete},
                      f, indent=2, sort_keys=True)
            f.write("\n")


def _mean_std(per_seed: dict) -> tuple:
    """Aggregate dict-of-dicts {seed: {metric: value}} into mean/stddev
    dicts over the metric keys present in every seed."""
    seeds = list(per_seed)
    keys = [k for k in per_seed[seeds[0]]
            if all(isinstance(per_seed[s].get(k), (int, float)) for s in seeds)]
    mean, std = {}, {}
    for k in keys:
        vals = np.array([float(per_seed[s][k]) for s in seeds], dtype=np.float64)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std(ddof=0))
    return mean, std


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None,
                   data_dir: Optional[str] = None, cache_dir: Optional[str] = None,
                   figures: bool = False) -> RunManifest:
    """Train/load per seed, evaluate what the config asks for, write the
    report. On error the manifest of partial artifacts is still written
    (complete=false) before the exception propagates."""
    out = out_dir or cfg.out_dir
    if not out:
        raise ConfigError("out_dir: no output directory (config out_dir or --out)")
    os.makedirs(out, exist_ok=True)
    cache = cache_dir or os.path.join(out, "checkpoints")
    h = config_hash(cfg)
    man = RunManifest(name=cfg.name, config_hash=h, version=_pkg_version,
                      method=cfg.method, dataset=cfg.dataset, seeds=list(cfg.seeds))
    t0 = time.time()
    try:
        data = load_datasets(cfg, data_dir)
        results = {"name": cfg.name, "method": cfg.method, "dataset": cfg.dataset,
                   "config_hash": h, "seeds": list(cfg.seeds),
                   "calibration": {"per_seed": {}},
                   "deployed_params": None}
        if cfg.temperature:
            results["temperature"] = {"per_seed": {}}
        if cfg.eval["drift"]:
            results["drift"] = {"per_seed": {}}
        if cfg.eval["failure"]:
            results["failure"] = {"per_seed": {}}

        n_id = min(cfg.monitor["id_stream_n"], len(data["test"]))
        id_block = data["test"].subset(np.arange(n_id), name=data["test"].name + "-idblock")
        cid = (corruption_streams(cfg, id_block)
               if (cfg.eval["drift"] or cfg.eval["failure"]) else {})

        sweeps = {}
        th = train_hash(cfg)
        for seed in cfg.seeds:
            cdir = _seed_cache_dir(cache, th, seed)
            model = _cache_load(cfg, cdir)
            if model is None:
                model, log = train_for_config(cfg, data["train"], seed)
                _cache_store(cfg, cdir, model, log)
            man.checkpoints[str(seed)] = os.path.relpath(cdir, out)
            predict = predictor_for(cfg, model, seed)

            rep = CalibrationReport.from_predictions(
                _batched_probs(predict, data["test"].images), data["test"].labels,
                num_bins=cfg.eval["bins"])
            results["calibration"]["per_seed"][str(seed)] = rep.to_dict()
            rep.bins_to_csv(os.path.join(out, f"reliability_seed{seed}.csv"))
            man.artifacts.append(f"reliability_seed{seed}.csv")
            if results["deployed_params"] is None:
                results["deployed_params"] = _deployed_params(cfg, model)

            if cfg.temperature:
                results["temperature"]["per_seed"][str(seed)] = _temperature_eval(
                    cfg, model, data, seed)

            if cfg.eval["drift"]:
                drift = accuracy_drop_auprc(predict, id_block, cid,
                                            calibrate_id_stats(predict, id_block,
                                                               cfg.monitor["m"]),
                                            m=cfg.monitor["m"],
                                            per_corruption=cfg.monitor["per_corruption"])
                row = {"auprc": drift.auprc}
                for kind, v in drift.per_kind.items():
                    row[f"auprc_{kind}"] = v
                results["drift"]["per_seed"][str(seed)] = row
                if drift.points:
                    sweep_path = os.path.join(out, f"pr_curve_seed{seed}.csv")
                    sweep_to_csv(drift.points, sweep_path)
                    man.artifacts.append(f"pr_curve_seed{seed}.csv")
                    sweeps[seed] = drift.points

            if cfg.eval["failure"]:
                results["failure"]["per_seed"][str(seed)] = _failure_eval(
                    predict, id_block, cid, data["ood"])

            for fname in ("train_log.csv", "ev_trace.csv"):
                src = os.path.join(cdir, fname)
                if os.path.exists(src):
                    dst = f"{os.path.splitext(fname)[0]}_seed{seed}.csv"
                    shutil.copyfile(src, os.path.join(out, dst))
                    man.artifacts.append(dst)

        for section in ("calibration", "temperature", "drift", "failure"):
            if section in results:
                mean, std = _mean_std(results[section]["per_seed"])
                results[section]["mean"] = mean
                results[section]["stddev"] = std

        man.artifacts.extend(emit_report(results, out, figures=figures))
        man.results = results
        man.complete = True
        return man
    finally:
        man.wall_clock_sec = time.time() - t0
        man.to_json(os.path.join(out, "manifest.json"))


def _batched_probs(predict: Callable, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    chunks = [predict(images[lo:lo + batch_size])
              for lo in range(0, images.shape[0], batch_size)]
    return np.concatenate(chunks, axis=0)


def _deployed_params(cfg: ExperimentConfig, model) -> int:
    from .graph import param_count
    if cfg.method == "deep":
        return sum(param_count(g) for g in model.members)
    if cfg.method == "qute":
        return param_count(strip_for_inference(model))
    return param_count(model)


def _temperature_eval(cfg: ExperimentConfig, model, data: dict, seed: int) -> dict:
    """Pool-then-calibrate on the training validation split."""
    if cfg.method == "deep":
        raise ConfigError("temperature: pool-then-calibrate is defined for single-graph "
                          "methods here; deep is not wired up")
    train_ds = data["train"]
    val_idx, _ = val_split_indices(len(train_ds), cfg.train["val_fraction"], Rng(seed, 2))
    if val_idx.shape[0] == 0:
        raise ConfigError("temperature: train.val_fraction is 0, no split to fit on")
    val_x, val_y = train_ds.images[val_idx], train_ds.labels[val_idx]
    graph = strip_for_inference(model) if cfg.method == "qute" else model
    exits = graph.deployed_exit_names()
    val_logits = pooled_logits(graph, val_x, exits=exits)
    t_fit = fit_temperature(val_logits, val_y)
    from .baselines import apply_temperature
    val_raw = nll_metric(apply_temperature(val_logits, 1.0), val_y)
    val_ts = nll_metric(apply_temperature(val_logits, t_fit), val_y)
    test_probs = predict_with_temperature(graph, data["test"].images, t_fit, exits=exits)
    return {"t": float(t_fit), "val_nll_raw": val_raw, "val_nll_ts": val_ts,
            "test_nll_ts": nll_metric(test_probs, data["test"].labels)}


def _failure_eval(predict: Callable, id_block: Dataset, cid: dict, ood: Dataset) -> dict:
    id_probs = _batched_probs(predict, id_block.images)
    id_conf = id_probs.max(axis=1)
    id_correct = (id_probs.argmax(axis=1) == id_block.labels)
    confs = [id_conf]
    corrects = [id_correct]
    for kind in sorted(cid):
        p = _batched_probs(predict, cid[kind].images)
        confs.append(p.max(axis=1))
        corrects.append(p.argmax(axis=1) == cid[kind].labels)
    ood_conf = _batched_probs(predict, ood.images).max(axis=1)
    return failure_tasks(np.concatenate(confs), np.concatenate(corrects),
                         id_conf, id_correct, ood_conf)


# ---------------------------------------------------------------------------
# report emission

_CAL_COLS = ("f1", "acc", "ece", "brier", "nll", "nll_binary")


def emit_report(results: dict, out_dir: str, figures: bool = False) -> list:
    """Write the delimited tables (and figures when asked) from an
    aggregated results dict. Returns the artifact names written."""
    if not results or "calibration" not in results:
        raise ConfigError("results: nothing to report")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    import csv as _csv

    method = results.get("method", "?")
    with open(os.path.join(out_dir, "calibration.csv"), "w", newline="") as f:
        wr = _csv.writer(f)
        wr.writerow(["method", "seed", "n"] + list(_CAL_COLS))
        per_seed = results["calibration"]["per_seed"]
        for seed in sorted(per_seed, key=int):
            row = per_seed[seed]
            wr.writerow([method, seed, row["n"]] + [f"{row[c]:.6f}" for c in _CAL_COLS])
        for agg in ("mean", "stddev"):
            row = results["calibration"].get(agg)
            if row:
                wr.writerow([method, agg, ""] + [f"{row[c]:.6f}" for c in _CAL_COLS])
    written.append("calibration.csv")

    if "drift" in results:
        with open(os.path.join(out_dir, "auprc.csv"), "w", newline="") as f:
            wr = _csv.writer(f)
            wr.writerow(["method", "seed", "curve", "auprc"])
            per_seed = results["drift"]["per_seed"]
            for seed in sorted(per_seed, key=int):
                for key in sorted(per_seed[seed]):
                    curve = "pooled" if key == "auprc" else key[len("auprc_"):]
                    wr.writerow([method, seed, curve, f"{per_seed[seed][key]:.6f}"])
            for agg in ("mean", "stddev"):
                for key in sorted(results["drift"].get(agg, {})):
                    curve = "pooled" if key == "auprc" else key[len("auprc_"):]
                    wr.writerow([method, agg, curve, f"{results['drift'][agg][key]:.6f}"])
        written.append("auprc.csv")

    if "failure" in results:
        with open(os.path.join(out_dir, "failure.csv"), "w", newline="") as f:
            wr = _csv.writer(f)
            wr.writerow(["method", "seed", "task", "auroc"])
            per_seed = results["failure"]["per_seed"]
            for seed in sorted(per_seed, key=int):
                for task in sorted(per_seed[seed]):
                    wr.writerow([method, seed, task, f"{per_seed[seed][task]:.6f}"])
            for agg in ("mean", "stddev"):
                for task in sorted(results["failure"].get(agg, {})):
                    wr.writerow([method, agg, task, f"{results['failure'][agg][task]:.6f}"])
        written.append("failure.csv")

    if "temperature" in results:
        with open(os.path.join(out_dir, "temperature.csv"), "w", newline="") as f:
            wr = _csv.writer(f)
            wr.writerow(["method", "seed", "t", "val_nll_raw", "val_nll_ts", "test_nll_ts"])
            per_seed = results["temperature"]["per_seed"]
            for seed in sorted(per_seed, key=int):
                row = per_seed[seed]
                wr.writerow([method, seed] + [f"{row[c]:.6f}" for c in
                                              ("t", "val_nll_raw", "val_nll_ts", "test_nll_ts")])
        written.append("temperature.csv")

    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write("\n")
    written.append("report.json")

    if figures:
        from . import plots
        written.extend(plots.render_report_figures(results, out_dir))
    return written
