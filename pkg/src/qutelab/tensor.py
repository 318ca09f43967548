"""Minimal reverse-mode autodiff core for small CNNs.

Storage is float32 throughout. GEMMs (conv/dense) run in float32 —
deterministic on a given BLAS, and at these layer sizes the partial
sums stay well-conditioned — while everything that reduces over a long
axis outside a GEMM (means, losses, softmax normalization, batch-axis
gradient accumulation, pooling) accumulates in float64 and downcasts.
Every op checks its output for NaN/Inf and raises NumericError instead
of propagating — a non-finite value anywhere is a bug or a diverged
run, never data.

The op set is closed: conv2d, depthwise_conv2d (pointwise conv is
conv2d with a 1x1 kernel), dense, relu, maxpool2x2, global_avg_pool,
dropout (inverted), softmax, cross_entropy, plus scalar add/scale for
combining losses. Gradients flow through a define-by-run tape; call
.backward() on a scalar loss.
"""

from __future__ import annotations

import math
import threading
from typing import Iterable, Optional

import numpy as np

from .rng import Rng


class NumericError(RuntimeError):
    """A non-finite value appeared where only finite numbers are legal."""


_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager: ops inside build no tape (evaluation path).
    The flag is per-thread so concurrent trainings don't disable each
    other's tapes."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _grad_state.enabled = False

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


def _check_finite(name: str, arr: np.ndarray) -> None:
    if arr.size == 0:
        return
    # one pass: NaN/Inf anywhere poisons the float64 sum, and float32
    # magnitudes can never overflow a float64 accumulator
    if not np.isfinite(np.sum(arr, dtype=np.float64)):
        raise NumericError(f"non-finite values in output of {name}")


def _f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


class Tensor:
    """n-d array node. data is float32, row-major; grad matches shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Reverse pass from this node. Root must be scalar unless seeded."""
        if self._backward is None and not self._parents:
            raise RuntimeError("backward called on a tensor with no recorded forward graph")
        if seed is None:
            if self.data.size != 1:
                raise RuntimeError("backward without seed requires a scalar root")
            seed = np.ones_like(self.data)
        # iterative topological order over the tape
        topo, stack, seen = [], [(self, False)], set()
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._ensure_grad()
        self.grad = self.grad + _f32(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, k: float) -> "Tensor":
        return scale(self, k)

    __rmul__ = __mul__

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, op={self._op})"


class Param(Tensor):
    """Trainable tensor with Adam state. Non-trainable params still
    receive gradients; the optimizer just skips them."""

    __slots__ = ("adam_m", "adam_v", "trainable")

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=True)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.trainable = trainable

    def __repr__(self):
        return f"Param(shape={tuple(self.shape)}, trainable={self.trainable})"


def _make(out_data: np.ndarray, parents, backward, op: str) -> Tensor:
    out_data = _f32(out_data)
    _check_finite(op, out_data)
    t = Tensor(out_data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(p for p in parents if p.requires_grad or p._parents)
        t._backward = backward
        t._op = op
    return t


# ---------------------------------------------------------------------------
# im2col helpers


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _im2col(xp: np.ndarray, kh: int, kw: int, oh: int, ow: int, stride: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> patches (N, C, KH, KW, OH, OW), one strided copy."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return np.ascontiguousarray(view)


def _col2im(dpatches: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Scatter-add patches (N,C,KH,KW,OH,OW) back to (N,C,Hp,Wp)."""
    n, c, kh, kw, oh, ow = dpatches.shape
    dx = np.zeros((n, c, hp, wp), dtype=dpatches.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dpatches[:, :, i, j]
    return dx


def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        if stride != 1:
            raise ValueError("padding='same' supports stride 1 only")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("padding='same' requires odd kernel sizes")
        oh, ow = h, w
    elif padding == "valid":
        ph = pw = 0
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        if oh <= 0 or ow <= 0:
            raise ValueError(f"kernel {kh}x{kw} does not fit input {h}x{w}")
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return ph, pw, oh, ow


# ---------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2d convolution, NCHW. w: (Cout, Cin, KH, KW), b: (Cout,).

    A 1x1 kernel makes this the pointwise (channel-mixing) conv.
    """
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    ph, pw, oh, ow = _conv_geometry(h, wd, kh, kw, stride, padding)
    xp = _pad_hw(x.data, ph, pw)
    patches = _im2col(xp, kh, kw, oh, ow, stride)  # (N,Cin,KH,KW,OH,OW)
    pmat = patches.reshape(n, cin * kh * kw, oh * ow)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat[None], pmat)  # (N, Cout, OH*OW)
    out += b.data[None, :, None]
    out = out.reshape(n, cout, oh, ow)

    def backward(dout: np.ndarray) -> None:
        dm = np.ascontiguousarray(dout.reshape(n, cout, oh * ow))
        if w.requires_grad:
            # per-sample GEMMs, then a float64 reduction over the batch
            dw = np.matmul(dm, pmat.transpose(0, 2, 1)).sum(axis=0, dtype=np.float64)
            w._ensure_grad()
            w.grad += dw.reshape(w.shape).astype(np.float32)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += dm.sum(axis=(0, 2), dtype=np.float64).astype(np.float32)
        if x.requires_grad or x._parents:
            dp = np.matmul(wmat.T[None], dm)  # (N, Cin*KH*KW, OH*OW)
            dp = dp.reshape(n, cin, kh, kw, oh, ow)
            dxp = _col2im(dp, xp.shape[2], xp.shape[3], stride)
            dx = dxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else dxp
            x._ensure_grad()
            x.grad += dx

    return _make(out, (x, w, b), backward, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel convolution. w: (C, KH, KW), b: (C,)."""
    n, c, h, wd = x.shape
    cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"depthwise channel mismatch: input {c}, kernel {cw}")
    ph, pw, oh, ow = _conv_geometry(h, wd, kh, kw, stride, padding)
    xp = _pad_hw(x.data, ph, pw)
    patches = _im2col(xp, kh, kw, oh, ow, stride)
    pmat = patches.reshape(n, c, kh * kw, oh * ow)
    wmat = w.data.reshape(c, kh * kw)
    out = np.einsum("nckp,ck->ncp", pmat, wmat, optimize=True)
    out += b.data[None, :, None]
    out = out.reshape(n, c, oh, ow)

    def backward(dout: np.ndarray) -> None:
        dm = dout.reshape(n, c, oh * ow)
        if w.requires_grad:
            per_sample = np.einsum("ncp,nckp->nck", dm, pmat, optimize=True)
            w._ensure_grad()
            w.grad += per_sample.sum(axis=0, dtype=np.float64).reshape(w.shape).astype(np.float32)
        if b.requires_grad:
            b._ensure_grad()
            b.grad += dm.sum(axis=(0, 2), dtype=np.float64).astype(np.float32)
        if x.requires_grad or x._parents:
            dp = dm[:, :, None, :] * wmat[None, :, :, None]  # (N,C,KK,OHOW)
            dp = dp.reshape(n, c, kh, kw, oh, ow)
            dxp = _col2im(dp, xp.shape[2], xp.shape[3], stride)
            dx = dxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else dxp
            x._ensure_grad()
            x.grad += dx

    return _make(out, (x, w, b), backward, "depthwise_conv2d")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully connected layer. x: (N, F), w: (F, U), b: (U,)."""
    if x.data.ndim != 2:
        raise ValueError(f"dense expects (N, F) input, got {x.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def backward(dout: np.ndarray) -> None:
        if w.requires_grad:
            w._ensure_grad()
            w.grad += xd.T @ dout
        if b.requires_grad:
            b._ensure_grad()
            b.grad += dout.sum(axis=0, dtype=np.float64).astype(np.float32)
        if x.requires_grad or x._parents:
            x._ensure_grad()
            x.grad += dout @ wd.T

    return _make(out, (x, w, b), backward, "dense")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward(dout: np.ndarray) -> None:
        if x.requires_grad or x._parents:
            x._ensure_grad()
            x.grad += dout * (out > 0.0)

    return _make(out, (x,), backward, "relu")


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Requires even spatial dims; gradient
    routes to the first maximum in each window."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 requires even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    win = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(dout: np.ndarray) -> None:
        if x.requires_grad or x._parents:
            dwin = np.zeros_like(win)
            np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
            dx = dwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            x._ensure_grad()
            x.grad += dx

    return _make(out, (x,), backward, "maxpool2x2")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C), mean over the spatial grid."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64)

    def backward(dout: np.ndarray) -> None:
        if x.requires_grad or x._parents:
            x._ensure_grad()
            x.grad += (dout / np.float32(h * w))[:, :, None, None]

    return _make(out, (x,), backward, "global_avg_pool")


def dropout(x: Tensor, rate: float, rng: Rng, active: bool = True) -> Tensor:
    """Inverted dropout. Identity when inactive or rate == 0 (consumes no
    randomness on the identity path, so the zero-rate limit is bit-exact)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not active or rate == 0.0:
        return _make(x.data, (x,), lambda d: _passthrough(x, d), "dropout_id")
    keep = (rng.uniform(x.shape) >= rate).astype(np.float32) / np.float32(1.0 - rate)
    out = x.data * keep

    def backward(dout: np.ndarray) -> None:
        if x.requires_grad or x._parents:
            x._ensure_grad()
            x.grad += dout * keep

    return _make(out, (x,), backward, "dropout")


def _passthrough(x: Tensor, dout: np.ndarray) -> None:
    if x.requires_grad or x._parents:
        x._ensure_grad()
        x.grad += dout


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis of (N, L) logits."""
    z = x.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(dout: np.ndarray) -> None:
        if x.requires_grad or x._parents:
            p32 = p.astype(np.float32)
            inner = (dout * p32).sum(axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
            x._ensure_grad()
            x.grad += p32 * (dout - inner)

    return _make(p, (x,), backward, "softmax")


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class, probs pre-softmaxed.

    Probabilities are clamped at 1e-12 inside the log; the gradient uses
    the clamped divisor so a collapsed probability cannot produce Inf.
    """
    labels = np.asarray(labels)
    n, l = probs.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= l:
        raise ValueError("label outside [0, num_classes)")
    idx = np.arange(n)
    p_true = probs.data[idx, labels].astype(np.float64)
    out = -np.log(np.maximum(p_true, 1e-12)).mean()

    def backward(dout: np.ndarray) -> None:
        if probs.requires_grad or probs._parents:
            g = np.zeros_like(probs.data)
            g[idx, labels] = (-1.0 / np.maximum(p_true, 1e-12) / n).astype(np.float32)
            probs._ensure_grad()
            probs.grad += g * float(np.asarray(dout).reshape(-1)[0])

    return _make(np.array(out), (probs,), backward, "cross_entropy")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data.astype(np.float64) + b.data.astype(np.float64)

    def backward(dout: np.ndarray) -> None:
        _passthrough(a, dout)
        _passthrough(b, dout)

    return _make(out, (a, b), backward, "add")


def scale(x: Tensor, k: float) -> Tensor:
    out = x.data * np.float32(k)

    def backward(dout: np.ndarray) -> None:
        if x.requires_grad or x._parents:
            x._ensure_grad()
            x.grad += dout * np.float32(k)

    return _make(out, (x,), backward, "scale")


# ---------------------------------------------------------------------------
# optimizer and schedules


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.grad = None


def adam_step(params: Iterable[Param], lr: float, t: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update with bias correction. t is the 1-based global step.

    Frozen params (trainable=False) are left untouched even if they carry
    gradients.
    """
    if t < 1:
        raise ValueError("adam_step requires t >= 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        g = p.grad
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (g * g)
        mhat = p.adam_m / c1
        vhat = p.adam_v / c2
        p.data = p.data - np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(eps))
        _check_finite("adam_step", p.data)


def lr_schedule(initial: float, decay: float, epoch: int) -> float:
    """Exponential decay: initial * decay**epoch (epoch 0-indexed)."""
    return initial * decay ** epoch


# ---------------------------------------------------------------------------
# initializers


def he_uniform(shape, fan_in: int, rng: Rng) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(shape, -limit, limit).astype(np.float32)


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: Rng) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape, -limit, limit).astype(np.float32)
