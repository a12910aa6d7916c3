"""Simulated compressed communication for sharded data-parallel SGD.

Group-wise 4/8-bit quantization, blockwise Hadamard smoothing, quantized
reduce-scatter and all-gather on a simulated multi-node cluster, and a
training loop that compresses weight differences and gradients.
"""

__version__ = "0.1.0"

from .collectives import (
    ClusterTopology,
    ReduceConfig,
    all_gather,
    exact_reduce_scatter,
    naive_tlqhs_reduce,
    reduce_scatter,
    ring_reduce_scatter_quantized,
    two_level_reduce_scatter,
)
from .compressors import CompressorSpec, InputDist, compress, estimate_delta, estimate_kappa, to_biased
from .core import SeededRng
from .costmodel import ByteLedger, comm_bits_per_param, estimate_time
from .hadamard import HadamardConfig, fwht_blockwise
from .quant import QuantizedChunk, dequantize, quantize, wire_decode, wire_encode
from .tasks import make_task
from .train import TrainConfig, TrainState, compressed_sgd_step, run_counterexample, sharded_iteration, train_run

__all__ = [
    "ByteLedger",
    "ClusterTopology",
    "CompressorSpec",
    "HadamardConfig",
    "InputDist",
    "QuantizedChunk",
    "ReduceConfig",
    "SeededRng",
    "TrainConfig",
    "TrainState",
    "all_gather",
    "comm_bits_per_param",
    "compress",
    "compressed_sgd_step",
    "dequantize",
    "estimate_delta",
    "estimate_kappa",
    "estimate_time",
    "exact_reduce_scatter",
    "fwht_blockwise",
    "make_task",
    "naive_tlqhs_reduce",
    "quantize",
    "reduce_scatter",
    "ring_reduce_scatter_quantized",
    "run_counterexample",
    "sharded_iteration",
    "to_biased",
    "train_run",
    "two_level_reduce_scatter",
    "wire_decode",
    "wire_encode",
]
