"""Flat float32 tensors, counter-based RNG streams and synthetic generators.

All numeric payloads in the package are 1-D ``float32`` numpy arrays. Use
:func:`as_flat` at API boundaries to coerce and validate them.

Randomness comes from :class:`SeededRng`, a thin wrapper over numpy's Philox
counter-based generator. A stream is identified by ``(seed, path)``; child
streams are derived with :meth:`SeededRng.spawn` using the offsets below so
that per-worker streams never depend on the order in which they are created.
"""

from __future__ import annotations

import numpy as np

# sub-seed offsets used by the train/collectives modules
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_GRAD_COMPRESS = 3
STREAM_WDIFF_COMPRESS = 4
STREAM_VALIDATION = 5
STREAM_BATCH = 6
STREAM_TRIALS = 7


class NonFiniteError(ValueError):
    pass


def as_flat(data, *, copy: bool = False) -> np.ndarray:
    """Coerce ``data`` to a 1-D float32 array, rejecting NaN/Inf."""
    arr = np.array(data, dtype=np.float32, copy=copy) if copy else np.asarray(data, dtype=np.float32)
    arr = arr.reshape(-1)
    if arr.size and not np.isfinite(arr).all():
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


class SeededRng:
    """Reproducible random stream keyed by a seed and a derivation path.

    ``SeededRng(7).spawn(3)`` always yields the same stream, no matter how many
    draws were taken from the parent. Draws from one instance advance its
    internal Philox counter; :meth:`clone` copies that position.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        key = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.path]).generate_state(2, np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, path={self.path})"

    def spawn(self, *offsets: int) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(offsets))

    def clone(self) -> "SeededRng":
        other = SeededRng.__new__(SeededRng)
        other.seed, other.path = self.seed, self.path
        bitgen = np.random.Philox()
        bitgen.state = self._gen.bit_generator.state
        other._gen = np.random.Generator(bitgen)
        return other

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 values in [0, 1), 53 random bits each."""
        return self._gen.random(n)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        return self._gen.integers(low, high, size=n)

    def standard_normal(self, n: int) -> np.ndarray:
        """Box-Muller on consecutive uniform pairs, float64.

        Pair ``i`` consumes uniforms ``(u[2i], u[2i+1])`` and yields
        ``r cos(t)`` then ``r sin(t)``; an odd tail drops the last sine.
        """
        if n == 0:
            return np.zeros(0)
        m = (n + 1) // 2
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        t = 2.0 * np.pi * u[:, 1]
        z = np.empty((m, 2))
        z[:, 0] = r * np.cos(t)
        z[:, 1] = r * np.sin(t)
        return z.reshape(-1)[:n]


def fill_gaussian(rng: SeededRng, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if n < 0 or std < 0:
        raise ValueError("need n >= 0 and std >= 0")
    z = rng.standard_normal(n)
    return (mean + std * z).astype(np.float32)


def fill_spiky(rng: SeededRng, n: int, spike_prob: float, spike_scale: float) -> np.ndarray:
    """Gaussian samples where each element is scaled by ``spike_scale`` w.p. ``spike_prob``.

    Normals are drawn first, then one uniform per element for the spike mask,
    so ``spike_prob=1, spike_scale=1`` reproduces :func:`fill_gaussian`.
    """
    if not 0.0 <= spike_prob <= 1.0:
        raise ValueError("spike_prob must be in [0, 1]")
    if spike_scale < 1.0:
        raise ValueError("spike_scale must be >= 1")
    z = rng.standard_normal(n)
    spikes = rng.uniform(n) < spike_prob
    return (z * np.where(spikes, float(spike_scale), 1.0)).astype(np.float32)
