"""Group-wise symmetric k-bit quantization and the chunk wire format.

Per group of ``G`` consecutive elements the scale is ``s = max|x|`` and codes
are ``round_half_away(x / s * qmax)`` with ``qmax = 2**(k-1) - 1``, so the code
``-2**(k-1)`` never appears. Dequantization is ``q * s / qmax``. A final
short group is allowed.

Wire layout (little-endian)::

    offset 0   uint8   k           bit width, 4 or 8
    offset 1   uint32  G           group size
    offset 5   uint64  n           element count
    offset 13  packed codes        ceil(n*k/8) bytes; k=4 packs two's-complement
                                   nibbles, element 2i in the low nibble
    ...        float32 scales      ceil(n/G) values
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import NonFiniteError

HEADER = struct.Struct("<BIQ")
HEADER_SIZE = HEADER.size
SUPPORTED_BITS = (4, 8)


class WireFormatError(ValueError):
    pass


def qmax_for(k: int) -> int:
    return (1 << (k - 1)) - 1


def num_groups(n: int, group_size: int) -> int:
    return -(-n // group_size)


def packed_size(n: int, k: int) -> int:
    return -(-n * k // 8)


def _grouped(x: np.ndarray, group_size: int) -> tuple[np.ndarray, int]:
    """Reshape ``(..., n)`` to ``(..., ngroups, G)``, zero-padding the tail."""
    n = x.shape[-1]
    ng = num_groups(n, group_size)
    pad = ng * group_size - n
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,), dtype=x.dtype)], axis=-1)
    return x.reshape(x.shape[:-1] + (ng, group_size)), n


def round_half_away(y: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(y) + np.float32(0.5)), y)


def scaled_codes(x: np.ndarray, qmax: int, group_size: int, rng=None):
    """Integer codes (as float32) and per-group scales for ``x`` of shape ``(..., n)``.

    Nearest rounding when ``rng`` is None, otherwise stochastic rounding with
    one uniform draw per element (row-major order over the padded groups).
    """
    x = np.asarray(x, dtype=np.float32)
    if x.size and not np.isfinite(x).all():
        raise NonFiniteError("cannot quantize non-finite values")
    g, n = _grouped(x, group_size)
    scales = np.abs(g).max(axis=-1) if g.shape[-1] else np.zeros(g.shape[:-1], np.float32)
    safe = np.where(scales > 0, scales, np.float32(1.0))[..., None]
    y = g / safe * np.float32(qmax)
    if rng is None:
        q = round_half_away(y)
    else:
        lo = np.floor(y)
        u = rng.uniform(y.size).reshape(y.shape)
        q = lo + (u < (y - lo))
    q = np.clip(q, -qmax, qmax).astype(np.float32)
    q = q.reshape(q.shape[:-2] + (-1,))[..., :n]
    return q, scales.astype(np.float32)


def dequantize_codes(q: np.ndarray, scales: np.ndarray, qmax: int, group_size: int) -> np.ndarray:
    g, n = _grouped(np.asarray(q, dtype=np.float32), group_size)
    out = g * scales[..., None] / np.float32(qmax)
    return out.reshape(out.shape[:-2] + (-1,))[..., :n]


def fake_quantize(x: np.ndarray, k: int, group_size: int, rng=None) -> np.ndarray:
    """``dequantize(quantize(x))`` without materializing packed bytes."""
    qmax = qmax_for(k)
    q, s = scaled_codes(x, qmax, group_size, rng)
    return dequantize_codes(q, s, qmax, group_size)


def pack_codes(q: np.ndarray, k: int) -> np.ndarray:
    """Pack integer codes along the last axis into bytes."""
    q = np.asarray(q).astype(np.int8)
    if k == 8:
        return q.view(np.uint8)
    nib = (q & 0x0F).astype(np.uint8)
    if nib.shape[-1] % 2:
        nib = np.concatenate([nib, np.zeros(nib.shape[:-1] + (1,), np.uint8)], axis=-1)
    return nib[..., 0::2] | (nib[..., 1::2] << 4)


def unpack_codes(packed: np.ndarray, k: int, n: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    if k == 8:
        return packed.view(np.int8)[..., :n]
    out = np.empty(packed.shape[:-1] + (2 * packed.shape[-1],), dtype=np.int8)
    out[..., 0::2] = packed & 0x0F
    out[..., 1::2] = packed >> 4
    out = np.where(out >= 8, out - 16, out).astype(np.int8)
    return out[..., :n]


@dataclass(frozen=True, eq=False)
class QuantizedChunk:
    k: int
    group_size: int
    n: int
    packed: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        if self.k not in SUPPORTED_BITS:
            raise WireFormatError(f"unsupported bit width {self.k}")
        if self.group_size < 1:
            raise WireFormatError("group size must be >= 1")
        if self.packed.size != packed_size(self.n, self.k):
            raise WireFormatError(
                f"packed length {self.packed.size} != {packed_size(self.n, self.k)} for n={self.n}, k={self.k}"
            )
        if self.scales.size != num_groups(self.n, self.group_size):
            raise WireFormatError("scale count does not match group layout")

    def __eq__(self, other):
        if not isinstance(other, QuantizedChunk):
            return NotImplemented
        return (
            (self.k, self.group_size, self.n) == (other.k, other.group_size, other.n)
            and np.array_equal(self.packed, other.packed)
            and self.scales.tobytes() == other.scales.tobytes()
        )

    __hash__ = None

    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.k, self.n)

    @property
    def payload_bytes(self) -> int:
        return self.packed.size + 4 * self.scales.size


def quantize(x, k: int, group_size: int, rng=None) -> QuantizedChunk:
    if k not in SUPPORTED_BITS:
        raise ValueError(f"k must be one of {SUPPORTED_BITS}")
    if group_size < 1:
        raise ValueError("group size must be >= 1")
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    q, s = scaled_codes(x, qmax_for(k), group_size, rng)
    return QuantizedChunk(k, group_size, x.size, pack_codes(q, k), s.reshape(-1))


def quantize_rows(x2d: np.ndarray, k: int, group_size: int) -> list[QuantizedChunk]:
    """Nearest-quantize each row of a 2-D array into its own chunk."""
    q, s = scaled_codes(x2d, qmax_for(k), group_size)
    packed = pack_codes(q, k)
    n = x2d.shape[-1]
    return [QuantizedChunk(k, group_size, n, packed[i], s[i]) for i in range(x2d.shape[0])]


def dequantize(c: QuantizedChunk) -> np.ndarray:
    return dequantize_codes(c.codes(), c.scales, qmax_for(c.k), c.group_size)


def wire_encode(c: QuantizedChunk) -> bytes:
    return (
        HEADER.pack(c.k, c.group_size, c.n)
        + np.ascontiguousarray(c.packed).tobytes()
        + np.ascontiguousarray(c.scales, dtype="<f4").tobytes()
    )


def wire_size(n: int, k: int, group_size: int) -> int:
    return HEADER_SIZE + packed_size(n, k) + 4 * num_groups(n, group_size)


def wire_decode(buf: bytes, offset: int = 0) -> tuple[QuantizedChunk, int]:
    """Decode one chunk starting at ``offset``; returns the chunk and the end offset."""
    if len(buf) - offset < HEADER_SIZE:
        raise WireFormatError("truncated header")
    k, group_size, n = HEADER.unpack_from(buf, offset)
    if k not in SUPPORTED_BITS:
        raise WireFormatError(f"unknown bit width {k}")
    if group_size < 1:
        raise WireFormatError("group size must be >= 1")
    npk, ns = packed_size(n, k), num_groups(n, group_size)
    start = offset + HEADER_SIZE
    end = start + npk + 4 * ns
    if len(buf) < end:
        raise WireFormatError("truncated payload")
    packed = np.frombuffer(buf, dtype=np.uint8, count=npk, offset=start)
    scales = np.frombuffer(buf, dtype="<f4", count=ns, offset=start + npk).astype(np.float32)
    if k == 4 and n and np.any(unpack_codes(packed, 4, n) == -8):
        raise WireFormatError("code -8 is outside the symmetric 4-bit range")
    if k == 8 and n and np.any(packed.view(np.int8) == -128):
        raise WireFormatError("code -128 is outside the symmetric 8-bit range")
    if ns and (not np.isfinite(scales).all() or (scales < 0).any()):
        raise WireFormatError("scales must be finite and non-negative")
    return QuantizedChunk(k, group_size, n, packed, scales), end


def decode(buf: bytes) -> QuantizedChunk:
    chunk, end = wire_decode(buf)
    if end != len(buf):
        raise WireFormatError(f"{len(buf) - end} trailing bytes after chunk")
    return chunk


def read_chunk_stream(buf: bytes) -> list[QuantizedChunk]:
    out, off = [], 0
    while off < len(buf):
        chunk, off = wire_decode(buf, off)
        out.append(chunk)
    return out
