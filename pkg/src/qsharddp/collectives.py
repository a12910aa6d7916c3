"""Single-process simulation of the reduce-scatter and all-gather collectives.

Workers are ranks ``r = node * N + local_rank``. Gradients arrive as a
``(P, d)`` float32 array (row ``r`` is worker ``r``'s local gradient) and
every reduce-scatter returns a ``(P, d // P)`` array whose row ``p`` is the
averaged shard owned by rank ``p``.

Numerical conventions shared by all modes:

* Received values are accumulated in float64 in a fixed source order and the
  sum is divided by ``P`` once, after the last reduction. Sums of a handful
  of float32 values are exact in float64, so every lossless mode agrees with
  :func:`exact_reduce_scatter` bit for bit.
* A lossy hop casts its input to float32, quantizes, and the receiver
  dequantizes back to float32. A lossless hop (``k = 32``) forwards the
  float64 buffer untouched and is billed as 32-bit payload.
* ``wire=True`` pushes every message through ``wire_encode``/``wire_decode``
  individually; the default path packs and unpacks the same codes in one
  vectorized call per phase. Both produce identical numbers and ledgers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quant
from .costmodel import ByteLedger
from .hadamard import fwht_blockwise

LOSSLESS = 32
MODES = ("exact", "ring_quantized", "two_level")


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterTopology:
    P: int
    N: int
    bw_intra: float = 150e9  # bytes/s
    bw_inter: float = 12.5e9

    def __post_init__(self):
        if self.P < 1 or self.N < 1:
            raise ValueError("P and N must be positive")
        if self.P % self.N:
            raise ValueError(f"N={self.N} must divide P={self.P}")

    @property
    def M(self) -> int:
        return self.P // self.N

    def node(self, r: int) -> int:
        return r // self.N

    def local(self, r: int) -> int:
        return r % self.N

    def rank(self, node: int, local: int) -> int:
        return node * self.N + local

    def channel(self, src: int, dst: int) -> str:
        return "intra" if self.node(src) == self.node(dst) else "inter"


@dataclass(frozen=True)
class ReduceConfig:
    mode: str = "two_level"
    k_intra: int = 8
    k_inter: int = 4
    group_size: int = 128
    hadamard: bool = False
    block: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown reduce mode {self.mode!r}")
        for k in (self.k_intra, self.k_inter):
            if k not in (4, 8, LOSSLESS):
                raise ValueError(f"bit width must be 4, 8 or {LOSSLESS}, got {k}")
        if self.group_size < 1:
            raise ValueError("group size must be >= 1")
        if self.hadamard:
            b = self.block
            if b < 2 or b & (b - 1):
                raise ValueError("Hadamard block must be a power of two >= 2")
            if self.group_size % b:
                raise AlignmentError(f"group size {self.group_size} not divisible by Hadamard block {b}")

    @classmethod
    def preset(cls, name: str, group_size: int = 128, block: int = 32) -> "ReduceConfig":
        table = {
            "exact": dict(mode="exact", k_intra=LOSSLESS, k_inter=LOSSLESS),
            "lossless": dict(mode="two_level", k_intra=LOSSLESS, k_inter=LOSSLESS),
            "ULq": dict(mode="two_level", k_intra=4, k_inter=4),
            "TLq": dict(mode="two_level", k_intra=8, k_inter=4),
            "TLq-HS": dict(mode="two_level", k_intra=8, k_inter=4, hadamard=True),
            "ring4": dict(mode="ring_quantized", k_intra=4, k_inter=4),
        }
        if name not in table:
            raise ValueError(f"unknown reduce preset {name!r}; choose from {sorted(table)}")
        return cls(group_size=group_size, block=block, **table[name])

    def alignment(self, topo: ClusterTopology) -> int:
        """Gradient length must be a multiple of this so shards hold whole groups."""
        return topo.P * self.group_size


def pad_to(x: np.ndarray, multiple: int) -> np.ndarray:
    d = x.shape[-1]
    extra = -d % multiple
    if not extra:
        return x
    return np.concatenate([x, np.zeros(x.shape[:-1] + (extra,), dtype=x.dtype)], axis=-1)


def _check_grads(topo: ClusterTopology, grads, multiple: int = 1) -> np.ndarray:
    g = np.asarray(grads, dtype=np.float32)
    if g.ndim != 2 or g.shape[0] != topo.P:
        raise ValueError(f"expected a ({topo.P}, d) gradient array, got shape {g.shape}")
    if g.shape[1] % (topo.P * multiple):
        raise AlignmentError(f"gradient length {g.shape[1]} is not a multiple of {topo.P * multiple}")
    return g


def _accumulate(x: np.ndarray, axis: int) -> np.ndarray:
    """Float64 sum over ``axis``, adding sources in index order."""
    x = np.moveaxis(x, axis, 0)
    acc = np.array(x[0], dtype=np.float64)
    for i in range(1, x.shape[0]):
        acc += x[i]
    return acc


def _transmit(values: np.ndarray, k: int, group_size: int, wire: bool):
    """What receivers reconstruct from messages along the last axis of ``values``.

    Returns ``(float64 array, payload bytes per message, header bytes per message)``.
    """
    n = values.shape[-1]
    if k == LOSSLESS:
        return np.array(values, dtype=np.float64), 4 * n, 0
    x = np.asarray(values, dtype=np.float32)
    qmax = quant.qmax_for(k)
    if wire:
        flat = x.reshape(-1, n)
        out = np.empty(flat.shape, dtype=np.float64)
        sizes = set()
        for i, row in enumerate(flat):
            buf = quant.wire_encode(quant.quantize(row, k, group_size))
            out[i] = quant.dequantize(quant.decode(buf))
            sizes.add(len(buf))
        (size,) = sizes
        return out.reshape(x.shape), size - quant.HEADER_SIZE, quant.HEADER_SIZE
    q, scales = quant.scaled_codes(x, qmax, group_size)
    packed = quant.pack_codes(q, k)
    codes = quant.unpack_codes(packed, k, n)
    out = quant.dequantize_codes(codes, scales, qmax, group_size)
    payload = packed.shape[-1] + 4 * scales.shape[-1]
    return out.astype(np.float64), payload, quant.HEADER_SIZE


def _bill(ledger, topo, pairs, payload, elems, header):
    if ledger is None:
        return
    counts = {"intra": 0, "inter": 0}
    for src, dst in pairs:
        if src != dst:
            counts[topo.channel(src, dst)] += 1
    for channel, count in counts.items():
        if count:
            ledger.record(channel, payload, elems, header, count=count)


def _ring_pairs(topo):
    return [(r, (r + 1) % topo.P) for r in range(topo.P)]


def exact_reduce_scatter(topo: ClusterTopology, grads, ledger: ByteLedger | None = None) -> np.ndarray:
    """Lossless averaged reduce-scatter; billed as an fp32 ring (P-1 hops of one shard)."""
    g = _check_grads(topo, grads)
    shard = g.shape[1] // topo.P
    total = _accumulate(g, 0) / topo.P
    for _ in range(topo.P - 1):
        _bill(ledger, topo, _ring_pairs(topo), 4 * shard, shard, 0)
    return total.astype(np.float32).reshape(topo.P, shard)


def ring_reduce_scatter_quantized(
    topo: ClusterTopology,
    grads,
    k: int = 4,
    group_size: int = 128,
    rng=None,
    ledger: ByteLedger | None = None,
    wire: bool = False,
) -> np.ndarray:
    """Ring reduce-scatter where every hop quantizes the running partial sum.

    Chunk ``c`` starts at rank ``c+1`` and travels ``P-1`` hops, each receiver
    adding its own slice, so it ends complete on rank ``c``. ``k=32`` makes
    every hop lossless. ``rng`` is accepted for interface symmetry; hops use
    nearest rounding.
    """
    g = _check_grads(topo, grads, group_size if k != LOSSLESS else 1)
    P = topo.P
    shard = g.shape[1] // P
    chunks = g.reshape(P, P, shard)  # [rank, chunk, :]
    idx = np.arange(P)
    holder = (idx + 1) % P
    partial = chunks[holder, idx].astype(np.float64)
    for _ in range(P - 1):
        received, payload, header = _transmit(partial, k, group_size, wire)
        receiver = (holder + 1) % P
        _bill(ledger, topo, zip(holder, receiver), payload, shard, header)
        partial = received + chunks[receiver, idx]
        holder = receiver
    return (partial / P).astype(np.float32)


def two_level_reduce_scatter(
    topo: ClusterTopology,
    grads,
    cfg: ReduceConfig,
    rng=None,
    ledger: ByteLedger | None = None,
    wire: bool = False,
    naive: bool = False,
) -> np.ndarray:
    """Intra-node all-to-all, local reduce, inter-node all-to-all, final reduce.

    Worker ``(m, l)`` sends worker ``(m, l2)`` the shards of every global rank
    with local rank ``l2``; after summing those ``N`` messages it forwards to
    ``(m2, l2)`` the shard of rank ``m2 * N + l2``. With ``cfg.hadamard`` the
    gradient is transformed once up front and the reduced shard once at the
    end. ``naive=True`` instead transforms around every (de)quantization:
    after the intra dequantize, before the inter quantize and after the inter
    dequantize, with no final transform.
    """
    g = _check_grads(topo, grads, cfg.group_size)
    if naive and not cfg.hadamard:
        naive = False
    P, N, M = topo.P, topo.N, topo.M
    S = g.shape[1] // P
    b = cfg.block
    if cfg.hadamard:
        g = fwht_blockwise(g, b)

    # [m, l_src, l_dst, payload]: payload is the M shards of ranks (0..M-1) * N + l_dst
    send = g.reshape(M, N, M, N, S).transpose(0, 1, 3, 2, 4).reshape(M, N, N, M * S)
    recv, payload, header = _transmit(send, cfg.k_intra, cfg.group_size, wire)
    _bill(
        ledger,
        topo,
        [(topo.rank(m, a), topo.rank(m, c)) for m in range(M) for a in range(N) for c in range(N)],
        payload,
        M * S,
        header,
    )
    if naive:
        recv = fwht_blockwise(recv, b)
    partial = _accumulate(recv, 1)  # [m, l_dst, payload]
    if naive:
        partial = fwht_blockwise(partial, b)

    # [m_src, l, m_dst, S]
    send2 = partial.reshape(M, N, M, S)
    recv2, payload, header = _transmit(send2, cfg.k_inter, cfg.group_size, wire)
    _bill(
        ledger,
        topo,
        [(topo.rank(a, l), topo.rank(c, l)) for a in range(M) for l in range(N) for c in range(M)],
        payload,
        S,
        header,
    )
    if naive:
        recv2 = fwht_blockwise(recv2, b)
    total = _accumulate(recv2, 0)  # [l, m_dst, S]
    total = total.transpose(1, 0, 2).reshape(P, S) / P
    if cfg.hadamard and not naive:
        total = fwht_blockwise(total, b)
    return total.astype(np.float32)


def naive_tlqhs_reduce(topo, grads, cfg: ReduceConfig, rng=None, ledger=None, wire=False) -> np.ndarray:
    """Two-level reduce with a Hadamard transform around every quantization step."""
    return two_level_reduce_scatter(topo, grads, cfg, rng, ledger, wire, naive=True)


def reduce_scatter(topo, grads, cfg: ReduceConfig, rng=None, ledger=None, wire=False) -> np.ndarray:
    if cfg.mode == "exact":
        return exact_reduce_scatter(topo, grads, ledger)
    if cfg.mode == "ring_quantized":
        return ring_reduce_scatter_quantized(topo, grads, cfg.k_inter, cfg.group_size, rng, ledger, wire)
    return two_level_reduce_scatter(topo, grads, cfg, rng, ledger, wire)


def all_gather(topo: ClusterTopology, payloads, ledger: ByteLedger | None = None, wire: bool = False):
    """Every rank collects all ``P`` payloads and concatenates them in rank order.

    Payloads are :class:`~qsharddp.quant.QuantizedChunk` (dequantized on
    receipt) or raw float32 arrays (forwarded losslessly). Returns a list with
    one assembled float32 array per rank.
    """
    P = topo.P
    if len(payloads) != P:
        raise ValueError(f"need {P} payloads, got {len(payloads)}")
    chunked = [isinstance(c, quant.QuantizedChunk) for c in payloads]
    if any(chunked) and not all(chunked):
        raise TypeError("payloads must be all chunks or all arrays")

    if not chunked[0]:
        parts = [np.asarray(x, dtype=np.float32).reshape(-1) for x in payloads]
        if ledger is not None:
            for p, x in enumerate(parts):
                _bill(ledger, topo, [(p, r) for r in range(P)], 4 * x.size, x.size, 0)
        return [np.concatenate(parts).astype(np.float32, copy=True) for _ in range(P)]

    if ledger is not None:
        for p, c in enumerate(payloads):
            _bill(ledger, topo, [(p, r) for r in range(P)], c.payload_bytes, c.n, quant.HEADER_SIZE)

    if wire:
        bufs = [quant.wire_encode(c) for c in payloads]
        out = []
        for r in range(P):
            got = [payloads[p] if p == r else quant.decode(bufs[p]) for p in range(P)]
            out.append(np.concatenate([quant.dequantize(c) for c in got]).astype(np.float32))
        return out

    layout = {(c.k, c.group_size, c.n) for c in payloads}
    if len(layout) == 1:
        k, G, n = layout.pop()
        packed = np.stack([c.packed for c in payloads])
        scales = np.stack([c.scales for c in payloads])
        out = []
        for r in range(P):
            codes = quant.unpack_codes(packed, k, n)
            out.append(quant.dequantize_codes(codes, scales, quant.qmax_for(k), G).reshape(-1))
        return out
    return [np.concatenate([quant.dequantize(c) for c in payloads]).astype(np.float32) for _ in range(P)]
