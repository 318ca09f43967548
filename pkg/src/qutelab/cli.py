"""Command-line entry points.

  qutelab train      --config c.json --out runs/x [--seed N] [--data-dir D]
  qutelab corrupt    --config c.json --out corrupted/ [--data-dir D]
  qutelab eval-calib --config c.json --out runs/x ...
  qutelab drift      --config c.json --out runs/x ...
  qutelab failure    --config c.json --out runs/x ...
  qutelab report     --config c.json --out runs/x ...

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
The report-shaped commands write CSV tables plus PNG figures; `report`
runs every evaluation the config enables. --data-dir falls back to the
QUTELAB_DATA_DIR environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .data import DataError, save_idx
from .experiment import (ConfigError, ExperimentConfig, config_hash, corruption_streams,
                         load_datasets, parse_config, run_experiment, train_for_config,
                         _cache_load, _cache_store, _seed_cache_dir)
from .tensor import NumericError


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("config: --config is required")
    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> str:
    out = args.out or cfg.out_dir
    if not out:
        raise ConfigError("out_dir: no output directory (config out_dir or --out)")
    return out


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    data = load_datasets(cfg, args.data_dir)
    cache = os.path.join(out, "checkpoints")
    h = config_hash(cfg)
    paths = {}
    for seed in cfg.seeds:
        cdir = _seed_cache_dir(cache, h, seed)
        model = _cache_load(cfg, cdir)
        if model is None:
            model, log = train_for_config(cfg, data["train"], seed)
            _cache_store(cfg, cdir, model, log)
            print(f"seed {seed}: trained -> {cdir}")
        else:
            print(f"seed {seed}: cached -> {cdir}")
        paths[str(seed)] = cdir
    with open(os.path.join(out, "train_manifest.json"), "w") as f:
        json.dump({"name": cfg.name, "config_hash": h, "checkpoints": paths},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    return 0


def cmd_corrupt(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    data = load_datasets(cfg, args.data_dir)
    import numpy as np
    n_id = min(cfg.monitor["id_stream_n"], len(data["test"]))
    block = data["test"].subset(np.arange(n_id))
    os.makedirs(out, exist_ok=True)
    for kind, ds in corruption_streams(cfg, block).items():
        img_path = os.path.join(out, f"{kind}-images-idx3-ubyte")
        lbl_path = os.path.join(out, f"{kind}-labels-idx1-ubyte")
        save_idx(ds, img_path, lbl_path)
        print(f"{kind}: {len(ds)} images -> {img_path}")
    return 0


def _run_with_eval(args, drift: bool, failure: bool, as_configured: bool = False) -> int:
    cfg = _load_config(args)
    if not as_configured:
        cfg.eval["drift"] = drift
        cfg.eval["failure"] = failure
    out = _out_dir(args, cfg)
    man = run_experiment(cfg, out_dir=out, data_dir=args.data_dir, figures=True)
    print(f"{cfg.name} [{man.config_hash}] -> {out}")
    for a in man.artifacts:
        print(f"  {a}")
    return 0


def cmd_eval_calib(args) -> int:
    return _run_with_eval(args, drift=False, failure=False)


def cmd_drift(args) -> int:
    return _run_with_eval(args, drift=True, failure=False)


def cmd_failure(args) -> int:
    return _run_with_eval(args, drift=False, failure=True)


def cmd_report(args) -> int:
    return _run_with_eval(args, drift=False, failure=False, as_configured=True)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qutelab",
                                 description="single-pass ensemble uncertainty experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn, desc in (
            ("train", cmd_train, "train (or reuse cached) models for each seed"),
            ("corrupt", cmd_corrupt, "write corrupted IDX datasets"),
            ("eval-calib", cmd_eval_calib, "calibration metrics on the ID test set"),
            ("drift", cmd_drift, "accuracy-drop detection over corruption streams"),
            ("failure", cmd_failure, "failure-detection AUROC tasks"),
            ("report", cmd_report, "full report with every configured evaluation")):
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's seed list with one seed")
        p.add_argument("--data-dir", default=None,
                       help="IDX data root (default: $QUTELAB_DATA_DIR)")
        p.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
