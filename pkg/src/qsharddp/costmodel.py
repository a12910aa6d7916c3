"""Byte accounting for simulated collectives and a bandwidth-only time model."""

from __future__ import annotations

from dataclasses import dataclass

CHANNELS = ("intra", "inter")


@dataclass
class ByteLedger:
    """Payload bytes moved across node-internal and node-crossing links.

    Payload excludes the fixed chunk header, which is tallied separately in
    ``header_bytes`` so that bits-per-element ratios stay exact.
    """

    intra_bytes: int = 0
    inter_bytes: int = 0
    intra_elems: int = 0
    inter_elems: int = 0
    header_bytes: int = 0
    messages: int = 0

    def record(self, channel: str, payload: int, elems: int, header: int = 0, count: int = 1):
        """Add ``count`` messages of ``payload`` bytes carrying ``elems`` elements each."""
        if channel == "intra":
            self.intra_bytes += count * payload
            self.intra_elems += count * elems
        elif channel == "inter":
            self.inter_bytes += count * payload
            self.inter_elems += count * elems
        else:
            raise ValueError(f"unknown channel {channel!r}")
        self.header_bytes += count * header
        self.messages += count

    def merge(self, other: "ByteLedger"):
        self.intra_bytes += other.intra_bytes
        self.inter_bytes += other.inter_bytes
        self.intra_elems += other.intra_elems
        self.inter_elems += other.inter_elems
        self.header_bytes += other.header_bytes
        self.messages += other.messages

    def bits_per_param(self, channel: str) -> float:
        nbytes = getattr(self, f"{channel}_bytes")
        elems = getattr(self, f"{channel}_elems")
        return 8.0 * nbytes / elems if elems else 0.0


def comm_bits_per_param(k: int, group_size: float, scale_bits: int = 32) -> float:
    """Wire bits per element for group-wise k-bit codes: ``k + scale_bits / G``.

    ``group_size=float('inf')`` gives the no-overhead limit.
    """
    if k not in (4, 8, 16, 32):
        raise ValueError(f"unsupported bit width {k}")
    if scale_bits not in (16, 32):
        raise ValueError("scale_bits must be 16 or 32")
    if group_size < 1:
        raise ValueError("group size must be >= 1")
    return k + scale_bits / group_size


def estimate_time(ledger: ByteLedger, topo, overlap: str = "sequential") -> float:
    """Seconds to move the ledger's bytes at the topology's link bandwidths (no latency term)."""
    if topo.bw_intra <= 0 or topo.bw_inter <= 0:
        raise ValueError("bandwidths must be positive")
    t_intra = ledger.intra_bytes / topo.bw_intra
    t_inter = ledger.inter_bytes / topo.bw_inter
    if overlap == "sequential":
        return t_intra + t_inter
    if overlap == "overlapped":
        return max(t_intra, t_inter)
    raise ValueError(f"overlap must be 'sequential' or 'overlapped', got {overlap!r}")
