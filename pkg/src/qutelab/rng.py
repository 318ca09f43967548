"""Deterministic random number generation.

A single generator type built on xoshiro256** with SplitMix64 seeding.
Scalar draws advance the 256-bit master state one step per output word.
Bulk draws (arrays for dropout masks, noise fields, jitter) consume one
master-state step as a nonce and expand it into independent per-lane
xoshiro states, so large arrays cost O(1) master-state steps while the
(seed, stream_id, call sequence) -> output mapping stays exact.

Integer outputs are bit-identical on every platform (pure wrapping
uint64 arithmetic). Float transforms are deterministic given IEEE-754;
the normal quantile uses a rational polynomial approximation rather
than Box-Muller so no trig enters the path.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_U64 = np.uint64


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def _mix64(z: int) -> int:
    # SplitMix64 output finalizer: a strong 64-bit bijection.
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _splitmix_next(state: int) -> tuple[int, int]:
    state = (state + _GOLDEN) & _MASK64
    return state, _mix64(state)


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> _U64(30))
    z = z * _U64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> _U64(27))
    z = z * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def _rotl_vec(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U64(k)) | (x >> _U64(64 - k))


# Acklam's rational approximation to the standard normal quantile.
_PPF_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
          1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_PPF_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
          6.680131188771972e+01, -1.328068155288572e+01)
_PPF_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
          -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_PPF_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
          3.754408661907416e+00)


def _norm_ppf(p: np.ndarray) -> np.ndarray:
    """Standard normal quantile for p in (0, 1), vectorized."""
    p = np.asarray(p, dtype=np.float64)
    out = np.empty_like(p)
    plow, phigh = 0.02425, 1.0 - 0.02425
    a, b, c, d = _PPF_A, _PPF_B, _PPF_C, _PPF_D

    lo = p < plow
    hi = p > phigh
    mid = ~(lo | hi)

    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        num = ((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]
        den = ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
        out[mid] = num * q / den
    if np.any(lo):
        q = np.sqrt(-2.0 * np.log(p[lo]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        out[lo] = num / den
    if np.any(hi):
        q = np.sqrt(-2.0 * np.log1p(-p[hi]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        out[hi] = -num / den
    return out


def derive_seed(*parts: int) -> int:
    """Fold integers into one well-mixed 64-bit seed (order-sensitive)."""
    acc = 0x243F6A8885A308D3  # pi fractional bits
    for p in parts:
        acc = _mix64(acc ^ _mix64((int(p) & _MASK64) + _GOLDEN))
    return acc


class Rng:
    """xoshiro256** generator with independent, explicitly addressed streams.

    Identical (seed, stream_id) and an identical call sequence reproduce
    identical outputs. Distinct stream_ids with the same seed give
    statistically independent sequences; training, evaluation sampling,
    and data corruption each take their own stream so adding draws to one
    never perturbs another.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = _mix64((self.seed & _MASK64) ^ 0x6A09E667F3BCC909)
        key = _mix64(key ^ (self.stream_id & _MASK64) ^ 0xBB67AE8584CAA73B)
        s, words = key, []
        for _ in range(4):
            s, w = _splitmix_next(s)
            words.append(w)
        if not any(words):
            words[0] = _GOLDEN  # all-zero state is the one forbidden xoshiro state
        self._s = words

    # -- scalar path ----------------------------------------------------

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    # -- bulk path ------------------------------------------------------

    def _bulk_u64(self, n: int) -> np.ndarray:
        """n output words from per-lane xoshiro states keyed off one nonce."""
        nonce = self.next_u64()
        lane = np.arange(n, dtype=np.uint64)
        st = _U64(nonce) + (lane + _U64(1)) * _U64(_GOLDEN)
        s = []
        for _ in range(4):
            st = st + _U64(_GOLDEN)
            s.append(_mix64_vec(st))
        s0, s1, s2, s3 = s
        return _rotl_vec(s1 * _U64(5), 7) * _U64(9)

    def _bulk_unit(self, n: int) -> np.ndarray:
        """n doubles in (0, 1), strictly exclusive of both ends."""
        x = self._bulk_u64(n)
        return ((x >> _U64(11)).astype(np.float64) + 0.5) * 2.0**-53

    # -- distributions --------------------------------------------------

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        """Uniform draws in [low, high). Scalar when shape is None."""
        if shape is None:
            return low + (high - low) * self.next_float()
        n = int(np.prod(shape))
        u = (self._bulk_u64(n) >> _U64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0):
        if shape is None:
            u = (self.next_u64() >> 11) * 2.0**-53
            u = u if u > 0.0 else 2.0**-54
            return mean + std * float(_norm_ppf(np.array([u]))[0])
        n = int(np.prod(shape))
        return (mean + std * _norm_ppf(self._bulk_unit(n))).reshape(shape)

    def integers(self, n: int, shape=None):
        """Uniform integers in [0, n)."""
        if n <= 0:
            raise ValueError("integers() requires n >= 1")
        if shape is None:
            return int(self.next_float() * n) % n
        m = int(np.prod(shape))
        u = (self._bulk_u64(m) >> _U64(11)).astype(np.float64) * 2.0**-53
        return np.minimum((u * n).astype(np.int64), n - 1).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Permutation of range(n) by sorting one block of uniform keys."""
        keys = self._bulk_u64(int(n))
        return np.argsort(keys, kind="stable")

    def poisson(self, lam: np.ndarray, max_iter: int = 400) -> np.ndarray:
        """Exact Poisson draws by inverse transform (product of uniforms).

        lam is elementwise; counts for lam beyond ~100 would need more
        iterations than max_iter, which is far above any rate used here.
        """
        lam = np.asarray(lam, dtype=np.float64)
        flat = lam.reshape(-1)
        limit = np.exp(-flat)
        prod = np.ones_like(flat)
        counts = np.zeros(flat.shape, dtype=np.int64)
        active = flat > 0
        it = 0
        while np.any(active) and it < max_iter:
            u = self._bulk_unit(flat.size)
            prod = np.where(active, prod * u, prod)
            still = active & (prod > limit)
            counts[still] += 1
            active = still
            it += 1
        return counts.reshape(lam.shape)

    def split(self, k: int) -> list["Rng"]:
        """k child generators on streams derived from this one's identity."""
        base = _mix64((self.seed & _MASK64) ^ _mix64(self.stream_id ^ 0x1F83D9AB))
        return [Rng(base, stream_id=i + 1) for i in range(k)]

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"
