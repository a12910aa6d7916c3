"""Blocked, orthonormal fast Walsh-Hadamard transform.

Each block of ``b`` consecutive elements along the last axis is replaced by
``H_b @ block / sqrt(b)`` where ``H_b`` is the Sylvester matrix. The
normalized transform is symmetric and orthogonal, so applying it twice is the
identity (up to rounding) and it can be moved across sums freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HadamardConfig:
    block: int = 32

    def __post_init__(self):
        b = self.block
        if b < 2 or b & (b - 1):
            raise ValueError(f"Hadamard block must be a power of two >= 2, got {b}")


def sylvester(b: int) -> np.ndarray:
    """Unnormalized ``b x b`` Sylvester Hadamard matrix (float64)."""
    h = np.ones((1, 1))
    while h.shape[0] < b:
        h = np.block([[h, h], [h, -h]])
    return h


def fwht_blockwise(x: np.ndarray, cfg: HadamardConfig | int = 32) -> np.ndarray:
    """Normalized blockwise transform along the last axis.

    Arithmetic runs in the input's float dtype (float32 or float64). Stage
    ``h = 1, 2, 4, ...`` pairs elements ``i`` and ``i + h`` inside each run
    of ``2h`` and writes ``(a + c, a - c)``; the ``1/sqrt(b)`` factor is a
    single multiply at the end.
    """
    b = cfg.block if isinstance(cfg, HadamardConfig) else HadamardConfig(int(cfg)).block
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float32)
    n = x.shape[-1]
    if n % b:
        raise ValueError(f"length {n} is not divisible by Hadamard block {b}")
    lead = x.shape[:-1]
    y = x.reshape(-1, n // b, b)
    h = 1
    while h < b:
        v = y.reshape(y.shape[0], y.shape[1], b // (2 * h), 2, h)
        a, c = v[..., 0, :], v[..., 1, :]
        y = np.stack([a + c, a - c], axis=-2).reshape(y.shape)
        h *= 2
    y = y * x.dtype.type(1.0 / math.sqrt(b))
    return y.reshape(lead + (n,))
