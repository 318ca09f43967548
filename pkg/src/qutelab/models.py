"""Canonical model builders.

The standard trunk is a small stage-structured CNN: each stage is
conv3x3(same) + relu, with 2x2 max pooling closing the first two stages.
Early exits attach at stage boundaries; stage indices (1-based) are the
exit-location vocabulary used by configs, and relative exit depth
(stage/num_stages) supplies the early-exit loss weights.

Head shapes used across methods:

  FINAL        gap -> dense(L) -> softmax
  EV_k         depthwise3x3 -> relu -> gap -> dense(L) -> softmax
  EE_k         pointwise conv to trunk output channels -> depthwise3x3
               -> relu -> gap -> dense(L) -> softmax
  EE-ensemble  gap -> dense(hidden) -> relu -> dense(L) -> softmax

The EE and EV depthwise layers are shape-compatible by construction;
that pair is what per-batch weight transfer copies.
"""

from __future__ import annotations

from typing import Optional, Sequence

from .graph import BlockSpec, ExitSpec


def build_trunk(widths: Sequence[int] = (8, 16, 24, 24),
                pool_stages: Sequence[int] = (1, 2),
                dropout_stages: Sequence[int] = (),
                dropout_rate: float = 0.0) -> tuple[list, list, int]:
    """Stage-structured conv trunk.

    Returns (trunk blocks, per-stage attach block names, output channels).
    dropout_stages inserts a dropout block at the end of those stages
    (used by the Monte-Carlo dropout baseline at the exit locations).
    """
    trunk: list[BlockSpec] = []
    stage_ends: list[str] = []
    for i, w in enumerate(widths, start=1):
        trunk.append(BlockSpec("conv", f"conv{i}", {"out_channels": int(w), "kernel": 3,
                                                    "padding": "same"}))
        trunk.append(BlockSpec("relu", f"relu{i}"))
        last = f"relu{i}"
        if i in pool_stages:
            trunk.append(BlockSpec("maxpool2x2", f"pool{i}"))
            last = f"pool{i}"
        if i in dropout_stages and dropout_rate > 0.0:
            trunk.append(BlockSpec("dropout", f"drop{i}", {"rate": float(dropout_rate)}))
            last = f"drop{i}"
        stage_ends.append(last)
    return trunk, stage_ends, int(widths[-1])


def final_exit(attach_after: str, num_classes: int, name: str = "final") -> ExitSpec:
    head = [BlockSpec("global_avg_pool", "gap"),
            BlockSpec("dense", "fc", {"units": num_classes}),
            BlockSpec("softmax", "sm")]
    return ExitSpec(name=name, kind="FINAL", attach_after=attach_after, head=head)


def ev_exit(k: int, attach_after: str, num_classes: int) -> ExitSpec:
    head = [BlockSpec("depthwise", "dw", {"kernel": 3, "padding": "same"}),
            BlockSpec("relu", "act"),
            BlockSpec("global_avg_pool", "gap"),
            BlockSpec("dense", "fc", {"units": num_classes}),
            BlockSpec("softmax", "sm")]
    return ExitSpec(name=f"ev{k}", kind="EV", attach_after=attach_after,
                    head=head, partner=f"ee{k}")


def ee_exit(k: int, attach_after: str, num_classes: int, trunk_channels: int) -> ExitSpec:
    head = [BlockSpec("conv", "pw", {"out_channels": int(trunk_channels), "kernel": 1,
                                     "padding": "valid"}),
            BlockSpec("depthwise", "dw", {"kernel": 3, "padding": "same"}),
            BlockSpec("relu", "act"),
            BlockSpec("global_avg_pool", "gap"),
            BlockSpec("dense", "fc", {"units": num_classes}),
            BlockSpec("softmax", "sm")]
    return ExitSpec(name=f"ee{k}", kind="EE", attach_after=attach_after,
                    head=head, partner=f"ev{k}")


def ee_ensemble_exit(k: int, attach_after: str, num_classes: int,
                     hidden_width: int = 64) -> ExitSpec:
    if hidden_width > 0:
        head = [BlockSpec("global_avg_pool", "gap"),
                BlockSpec("dense", "fc1", {"units": int(hidden_width)}),
                BlockSpec("relu", "act"),
                BlockSpec("dense", "fc2", {"units": num_classes}),
                BlockSpec("softmax", "sm")]
    else:
        head = [BlockSpec("global_avg_pool", "gap"),
                BlockSpec("dense", "fc", {"units": num_classes}),
                BlockSpec("softmax", "sm")]
    return ExitSpec(name=f"ee{k}", kind="EE", attach_after=attach_after, head=head)


def tau_for_locations(locations: Sequence[int], num_stages: int) -> list[float]:
    """Relative-depth weights: exit at stage s of D stages gets s/D."""
    return [loc / num_stages for loc in locations]


def input_shape_for(image_hw: tuple[int, int], channels: int = 1) -> tuple[int, int, int]:
    return (channels, image_hw[0], image_hw[1])
