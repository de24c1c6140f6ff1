"""Counter-based pseudo-random generator.

The stream is SplitMix64 evaluated in counter mode: draw ``i`` of a stream
with seed ``s`` is ``mix64(s + (i + 1) * GOLDEN)`` where ``mix64`` is the
SplitMix64 finalizer. Every draw is a pure function of (seed, counter), so
identical seeds give identical streams on every platform and run, and
arbitrarily many draws can be produced in one vectorized call.

Sub-streams are derived by hashing a label into a child seed
(``Rng.derive``), which keeps independent consumers (init of one weight
tensor, one synthetic sample, ...) decoupled from each other's draw counts.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer over a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _mix64_int(z: int) -> int:
    """SplitMix64 finalizer on a plain int (avoids uint64 scalar overflow warnings)."""
    m = 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & m
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & m
    return z ^ (z >> 31)


def _fnv1a(label: str) -> int:
    """FNV-1a 64-bit hash of a label, for deriving child seeds."""
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class Rng:
    """Deterministic counter-based random stream."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0

    def derive(self, *labels: str | int) -> "Rng":
        """Child stream keyed by a label path; independent of draw position."""
        key = self.seed
        for label in labels:
            token = label if isinstance(label, str) else f"#{label}"
            key = _mix64_int((key ^ _fnv1a(token)) & 0xFFFFFFFFFFFFFFFF)
        return Rng(key)

    def _raw(self, n: int) -> np.ndarray:
        base = np.uint64(self.counter + 1)
        idx = base + np.arange(n, dtype=np.uint64)
        out = _mix64(np.uint64(self.seed) + idx * _GOLDEN)
        self.counter += n
        return out

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """float32 array of i.i.d. uniforms in [lo, hi)."""
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return (lo + (hi - lo) * u).astype(np.float32).reshape(shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """float32 Gaussians via Box-Muller on the counter stream."""
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        # u1 in (0, 1] so log() is finite; u2 in [0, 1)
        u1 = ((raw[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / (1 << 53))
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (mean + std * z).astype(np.float32).reshape(shape)

    def truncated_normal(self, shape, std: float, bound_stds: float = 2.0) -> np.ndarray:
        """Zero-mean Gaussians redrawn until within ±bound_stds·std."""
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        n = int(np.prod(shape)) if shape else 1
        out = self.normal((n,), 0.0, std)
        limit = np.float32(bound_stds * std)
        bad = np.abs(out) > limit
        while bad.any():
            out[bad] = self.normal((int(bad.sum()),), 0.0, std)
            bad = np.abs(out) > limit
        return out.reshape(shape)

    def integers(self, n: int, lo: int, hi: int) -> np.ndarray:
        """Array of n ints in [lo, hi); modulo reduction (hi - lo << 2^64)."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        span = np.uint64(hi - lo)
        return (lo + (self._raw(int(n)) % span).astype(np.int64)).astype(np.int64)

    def shuffled(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) (Fisher-Yates)."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        draws = self._raw(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(draws[n - 1 - i] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
