"""Network graphs: a trunk of blocks plus any number of output exits.

A graph is data (BlockSpec/ExitSpec lists), parameters live in a flat
dict keyed by scoped block name, and the forward runs every exit off a
single trunk pass. Exits come in three kinds:

  FINAL  the ordinary output head at the end of the trunk
  EE     an early exit attached mid-trunk (training-time scaffolding)
  EV     an early-view head attached after the last trunk block; each EV
         is partnered with one EE and receives its depthwise weights

Checkpoints are a small self-describing binary: magic, version, a JSON
graph description, then the raw float32 parameter payload in
declaration order. Loading a checkpoint rebuilds the graph bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Param, Tensor

CHECKPOINT_MAGIC = b"QTE1"
CHECKPOINT_VERSION = 1

BLOCK_KINDS = {"conv", "depthwise", "dense", "relu", "maxpool2x2",
               "global_avg_pool", "dropout", "softmax"}
EXIT_KINDS = {"EE", "EV", "FINAL"}


class GraphError(ValueError):
    """Structural problem in a graph description."""


class CheckpointError(IOError):
    """Malformed or unsupported checkpoint file."""


@dataclass
class BlockSpec:
    kind: str
    name: str
    hyper: dict = field(default_factory=dict)


@dataclass
class ExitSpec:
    name: str
    kind: str                  # EE | EV | FINAL
    attach_after: str          # trunk block name whose activation feeds the head
    head: list                 # list[BlockSpec]
    partner: Optional[str] = None  # EE <-> EV pairing, by exit name


def _block_to_dict(b: BlockSpec) -> dict:
    return asdict(b)


def _block_from_dict(d: dict) -> BlockSpec:
    return BlockSpec(kind=d["kind"], name=d["name"], hyper=dict(d.get("hyper", {})))


class NetworkGraph:
    """Built graph: specs, inferred shapes, and initialized parameters."""

    def __init__(self, trunk, exits, input_shape, num_classes):
        self.trunk: list[BlockSpec] = list(trunk)
        self.exits: list[ExitSpec] = list(exits)
        self.input_shape = tuple(input_shape)      # (C, H, W)
        self.num_classes = int(num_classes)
        self.params: dict[str, Param] = {}
        self.shapes: dict[str, tuple] = {}         # scoped block name -> output shape
        self._param_order: list[str] = []

    # -- structure ------------------------------------------------------

    def trunk_block_names(self) -> list[str]:
        return [b.name for b in self.trunk]

    def exit_names(self, kind: Optional[str] = None) -> list[str]:
        return [e.name for e in self.exits if kind is None or e.kind == kind]

    def get_exit(self, name: str) -> ExitSpec:
        for e in self.exits:
            if e.name == name:
                return e
        raise GraphError(f"no exit named {name!r}")

    def deployed_exit_names(self) -> list[str]:
        """Exits that survive to inference: the EV heads when present
        (EEs and the original FINAL are stripped), every exit otherwise."""
        evs = self.exit_names("EV")
        return evs if evs else self.exit_names()

    def param_list(self, names=None) -> list[Param]:
        order = self._param_order if names is None else names
        return [self.params[k] for k in order]

    def scoped_param_names(self, scope: str) -> list[str]:
        prefix = scope + "."
        return [k for k in self._param_order if k.startswith(prefix)]

    def trunk_param_names(self) -> list[str]:
        return [k for k in self._param_order if k.startswith("trunk.")]

    def exit_param_names(self, exit_name: str) -> list[str]:
        return self.scoped_param_names(exit_name)

    def set_trunk_trainable(self, trainable: bool) -> None:
        for k in self.trunk_param_names():
            self.params[k].trainable = trainable

    def to_spec_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "trunk": [_block_to_dict(b) for b in self.trunk],
            "exits": [{
                "name": e.name, "kind": e.kind, "attach_after": e.attach_after,
                "head": [_block_to_dict(b) for b in e.head], "partner": e.partner,
            } for e in self.exits],
        }


# ---------------------------------------------------------------------------
# build


def _infer_shape(block: BlockSpec, shape: tuple) -> tuple:
    kind, hyper = block.kind, block.hyper
    if kind == "conv":
        if len(shape) != 3:
            raise GraphError(f"{block.name}: conv needs (C,H,W) input, got {shape}")
        c, h, w = shape
        k = int(hyper.get("kernel", 3))
        pad = hyper.get("padding", "same")
        stride = int(hyper.get("stride", 1))
        ph, pw, oh, ow = T._conv_geometry(h, w, k, k, stride, pad)
        return (int(hyper["out_channels"]), oh, ow)
    if kind == "depthwise":
        c, h, w = shape
        k = int(hyper.get("kernel", 3))
        pad = hyper.get("padding", "same")
        ph, pw, oh, ow = T._conv_geometry(h, w, k, k, int(hyper.get("stride", 1)), pad)
        return (c, oh, ow)
    if kind == "dense":
        if len(shape) != 1:
            raise GraphError(f"{block.name}: dense needs flat input, got {shape}")
        return (int(hyper["units"]),)
    if kind == "maxpool2x2":
        c, h, w = shape
        if h % 2 or w % 2:
            raise GraphError(f"{block.name}: maxpool2x2 needs even dims, got {h}x{w}")
        return (c, h // 2, w // 2)
    if kind == "global_avg_pool":
        c, h, w = shape
        return (c,)
    if kind in ("relu", "dropout", "softmax"):
        return shape
    raise GraphError(f"{block.name}: unknown block kind {kind!r}")


def _init_block_params(graph: NetworkGraph, scope: str, block: BlockSpec,
                       in_shape: tuple, rng: Rng) -> None:
    kind, hyper = block.kind, block.hyper
    key = f"{scope}.{block.name}"
    if kind == "conv":
        cin = in_shape[0]
        cout = int(hyper["out_channels"])
        k = int(hyper.get("kernel", 3))
        fan_in = cin * k * k
        w = Param(T.he_uniform((cout, cin, k, k), fan_in, rng))
        b = Param(np.zeros(cout, dtype=np.float32))
    elif kind == "depthwise":
        c = in_shape[0]
        k = int(hyper.get("kernel", 3))
        w = Param(T.he_uniform((c, k, k), k * k, rng))
        b = Param(np.zeros(c, dtype=np.float32))
    elif kind == "dense":
        fan_in = in_shape[0]
        units = int(hyper["units"])
        w = Param(T.glorot_uniform((fan_in, units), fan_in, units, rng))
        b = Param(np.zeros(units, dtype=np.float32))
    else:
        return
    graph.params[key + ".w"] = w
    graph.params[key + ".b"] = b
    graph._param_order += [key + ".w", key + ".b"]


def build_graph(trunk, exits, input_shape, num_classes, rng: Optional[Rng] = None,
                init: bool = True) -> NetworkGraph:
    """Validate the description, infer shapes, initialize parameters.

    Declaration order (trunk blocks, then exits in listed order) fixes
    both the RNG draw order at init and the checkpoint payload layout.
    """
    g = NetworkGraph(trunk, exits, input_shape, num_classes)
    names = [b.name for b in g.trunk]
    if len(set(names)) != len(names):
        raise GraphError("duplicate trunk block names")
    if not g.trunk:
        raise GraphError("empty trunk")
    for b in g.trunk:
        if b.kind not in BLOCK_KINDS:
            raise GraphError(f"unknown block kind {b.kind!r} in trunk block {b.name!r}")
    enames = [e.name for e in g.exits]
    if len(set(enames)) != len(enames):
        raise GraphError("duplicate exit names")
    last = names[-1]
    for e in g.exits:
        if e.kind not in EXIT_KINDS:
            raise GraphError(f"exit {e.name!r}: unknown kind {e.kind!r}")
        if e.attach_after not in names:
            raise GraphError(f"exit {e.name!r}: attach point {e.attach_after!r} is not a trunk block")
        if e.kind in ("EV", "FINAL") and e.attach_after != last:
            raise GraphError(f"exit {e.name!r}: {e.kind} exits attach only after the last trunk block")
        if e.kind == "EE" and e.attach_after == last:
            raise GraphError(f"exit {e.name!r}: EE exits must attach strictly before the last trunk block")
        if not e.head or e.head[-1].kind != "softmax":
            raise GraphError(f"exit {e.name!r}: head must end in softmax")
        if e.partner is not None and e.partner not in enames:
            raise GraphError(f"exit {e.name!r}: partner {e.partner!r} does not exist")

    # shape inference + parameter init, in declaration order
    if init and rng is None:
        rng = Rng(0)
    shape = tuple(input_shape)
    for b in g.trunk:
        if init:
            _init_block_params(g, "trunk", b, shape, rng)
        else:
            _register_param_slots(g, "trunk", b, shape)
        shape = _infer_shape(b, shape)
        g.shapes[f"trunk.{b.name}"] = shape
    for e in g.exits:
        hshape = g.shapes[f"trunk.{e.attach_after}"]
        hnames = [b.name for b in e.head]
        if len(set(hnames)) != len(hnames):
            raise GraphError(f"exit {e.name!r}: duplicate head block names")
        for b in e.head:
            if b.kind not in BLOCK_KINDS:
                raise GraphError(f"unknown block kind {b.kind!r} in exit {e.name!r}")
            if init:
                _init_block_params(g, e.name, b, hshape, rng)
            else:
                _register_param_slots(g, e.name, b, hshape)
            hshape = _infer_shape(b, hshape)
            g.shapes[f"{e.name}.{b.name}"] = hshape
        if hshape != (g.num_classes,):
            raise GraphError(
                f"exit {e.name!r}: head output shape {hshape} is not ({g.num_classes},)")
    return g


def _register_param_slots(graph: NetworkGraph, scope: str, block: BlockSpec,
                          in_shape: tuple) -> None:
    """Allocate zero params (checkpoint loading overwrites them)."""
    _init_block_params(graph, scope, block, in_shape, _ZeroRng())


class _ZeroRng:
    def uniform(self, shape=None, low=0.0, high=1.0):
        return np.zeros(shape, dtype=np.float64)


# ---------------------------------------------------------------------------
# forward


def _apply_block(block: BlockSpec, x: Tensor, graph: NetworkGraph, scope: str,
                 rng: Optional[Rng], dropout_active: bool) -> Tensor:
    kind = block.kind
    key = f"{scope}.{block.name}"
    if kind == "conv":
        return T.conv2d(x, graph.params[key + ".w"], graph.params[key + ".b"],
                        stride=int(block.hyper.get("stride", 1)),
                        padding=block.hyper.get("padding", "same"))
    if kind == "depthwise":
        return T.depthwise_conv2d(x, graph.params[key + ".w"], graph.params[key + ".b"],
                                  stride=int(block.hyper.get("stride", 1)),
                                  padding=block.hyper.get("padding", "same"))
    if kind == "dense":
        return T.dense(x, graph.params[key + ".w"], graph.params[key + ".b"])
    if kind == "relu":
        return T.relu(x)
    if kind == "maxpool2x2":
        return T.maxpool2x2(x)
    if kind == "global_avg_pool":
        return T.global_avg_pool(x)
    if kind == "dropout":
        rate = float(block.hyper.get("rate", 0.0))
        if dropout_active and rate > 0.0 and rng is None:
            raise GraphError(f"dropout block {block.name!r} active but no rng supplied")
        return T.dropout(x, rate, rng, active=dropout_active)
    if kind == "softmax":
        return T.softmax(x)
    raise GraphError(f"unknown block kind {kind!r}")


def forward_all_exits(graph: NetworkGraph, x: np.ndarray, mode: str = "eval",
                      rng: Optional[Rng] = None,
                      dropout_rate_override: Optional[float] = None) -> dict:
    """One trunk pass, every exit's class probabilities.

    mode: 'train' builds the gradient tape with dropout active;
    'eval' is deterministic (no tape, dropout off); 'eval_mc' keeps
    dropout active under no-grad for Monte-Carlo sampling.
    Returns {exit name: (N, L) probability Tensor}.
    """
    if mode not in ("train", "eval", "eval_mc"):
        raise ValueError(f"unknown mode {mode!r}")
    dropout_active = mode in ("train", "eval_mc")

    def run() -> dict:
        acts = {}
        t = Tensor(np.ascontiguousarray(x, dtype=np.float32))
        if t.data.ndim != 4 or t.data.shape[1:] != graph.input_shape:
            raise GraphError(
                f"input shape {t.data.shape} does not match graph input {graph.input_shape}")
        for b in graph.trunk:
            blk = b
            if dropout_rate_override is not None and b.kind == "dropout":
                blk = BlockSpec("dropout", b.name, {"rate": dropout_rate_override})
            t = _apply_block(blk, t, graph, "trunk", rng, dropout_active)
            acts[b.name] = t
        outs = {}
        for e in graph.exits:
            h = acts[e.attach_after]
            for b in e.head:
                h = _apply_block(b, h, graph, e.name, rng, dropout_active)
            outs[e.name] = h
        return outs

    if mode == "train":
        return run()
    with T.no_grad():
        return run()


def forward_logits(graph: NetworkGraph, x: np.ndarray, mode: str = "eval",
                   rng: Optional[Rng] = None) -> dict:
    """Like forward_all_exits but stops each head before its softmax,
    returning raw logits (needed by temperature scaling)."""
    dropout_active = mode in ("train", "eval_mc")
    with T.no_grad():
        acts = {}
        t = Tensor(np.ascontiguousarray(x, dtype=np.float32))
        for b in graph.trunk:
            t = _apply_block(b, t, graph, "trunk", rng, dropout_active)
            acts[b.name] = t
        outs = {}
        for e in graph.exits:
            h = acts[e.attach_after]
            for b in e.head:
                if b.kind == "softmax":
                    break
                h = _apply_block(b, h, graph, e.name, rng, dropout_active)
            outs[e.name] = h.data.copy()
    return outs


# ---------------------------------------------------------------------------
# accounting


def param_count(graph: NetworkGraph, deployed_only: bool = False) -> int:
    """Total parameter count. deployed_only counts the inference-time
    network: trunk plus the exits that survive stripping."""
    total = sum(graph.params[k].data.size for k in graph.trunk_param_names())
    exits = graph.deployed_exit_names() if deployed_only else graph.exit_names()
    for name in exits:
        total += sum(graph.params[k].data.size for k in graph.exit_param_names(name))
    return int(total)


def exit_head_param_count(graph: NetworkGraph, exit_name: str) -> int:
    return int(sum(graph.params[k].data.size for k in graph.exit_param_names(exit_name)))


def trunk_param_count(graph: NetworkGraph) -> int:
    return int(sum(graph.params[k].data.size for k in graph.trunk_param_names()))


def _block_flops(block: BlockSpec, in_shape: tuple, out_shape: tuple) -> int:
    # multiply-accumulate counts x2; activation/pool/softmax cost is not counted
    if block.kind == "conv":
        cout, oh, ow = out_shape
        cin = in_shape[0]
        k = int(block.hyper.get("kernel", 3))
        return 2 * oh * ow * cout * cin * k * k
    if block.kind == "depthwise":
        c, oh, ow = out_shape
        k = int(block.hyper.get("kernel", 3))
        return 2 * oh * ow * c * k * k
    if block.kind == "dense":
        return 2 * in_shape[0] * out_shape[0]
    return 0


def flops_estimate(graph: NetworkGraph, deployed_only: bool = False) -> int:
    """Per-sample forward FLOPs (2x multiply-accumulates)."""
    total = 0
    shape = graph.input_shape
    for b in graph.trunk:
        out = graph.shapes[f"trunk.{b.name}"]
        total += _block_flops(b, shape, out)
        shape = out
    exits = graph.deployed_exit_names() if deployed_only else graph.exit_names()
    for name in exits:
        e = graph.get_exit(name)
        hshape = graph.shapes[f"trunk.{e.attach_after}"]
        for b in e.head:
            out = graph.shapes[f"{e.name}.{b.name}"]
            total += _block_flops(b, hshape, out)
            hshape = out
    return int(total)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(graph: NetworkGraph, path: str) -> None:
    """magic 'QTE1' | u32 version | u32 json length | graph json |
    float32 little-endian parameter payload in declaration order."""
    spec = json.dumps(graph.to_spec_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(spec)))
        f.write(spec)
        for k in graph._param_order:
            f.write(np.ascontiguousarray(graph.params[k].data, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> NetworkGraph:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (spec_len,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + spec_len:
        raise CheckpointError("truncated checkpoint spec")
    spec = json.loads(blob[12:12 + spec_len].decode("utf-8"))
    trunk = [_block_from_dict(d) for d in spec["trunk"]]
    exits = [ExitSpec(name=d["name"], kind=d["kind"], attach_after=d["attach_after"],
                      head=[_block_from_dict(h) for h in d["head"]], partner=d.get("partner"))
             for d in spec["exits"]]
    g = build_graph(trunk, exits, tuple(spec["input_shape"]), spec["num_classes"], init=False)
    payload = blob[12 + spec_len:]
    expected = sum(g.params[k].data.size for k in g._param_order) * 4
    if len(payload) != expected:
        raise CheckpointError(
            f"parameter payload is {len(payload)} bytes, expected {expected}")
    off = 0
    for k in g._param_order:
        p = g.params[k]
        nbytes = p.data.size * 4
        arr = np.frombuffer(payload[off:off + nbytes], dtype="<f4").reshape(p.data.shape)
        p.data = np.ascontiguousarray(arr, dtype=np.float32)
        p.adam_m = np.zeros_like(p.data)
        p.adam_v = np.zeros_like(p.data)
        off += nbytes
    return g
