"""Vector compressors and Monte Carlo estimates of their approximation constants.

Two classes of compressors matter for the convergence argument:

* unbiased, kappa-approximate: ``E[U(v)] = v`` and
  ``E||U(v) - v||^2 <= kappa ||v||^2`` (used on gradients);
* delta-approximate, possibly biased: ``E||C(v) - v||^2 <= (1 - delta) ||v||^2``
  (allowed on weight differences).

:func:`estimate_kappa` and :func:`estimate_delta` report the worst ratio seen
over sampled inputs, which is a lower bound on the true constant rather than
a certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import quant
from .core import SeededRng, as_flat, fill_gaussian, fill_spiky
from .hadamard import fwht_blockwise

KINDS = ("identity", "nearest_kbit", "stochastic_kbit", "ternary_nearest", "hadamard_then_nearest_kbit")
UNBIASED_KINDS = ("identity", "stochastic_kbit")


@dataclass(frozen=True)
class CompressorSpec:
    kind: str = "identity"
    k: int = 4
    group_size: int = 128
    block: int = 32
    rng_subseed: int = 0
    # output multiplier; 1/(1+kappa) turns an unbiased compressor into a biased contraction
    post_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown compressor kind {self.kind!r}")
        if self.kind in ("nearest_kbit", "stochastic_kbit", "hadamard_then_nearest_kbit"):
            if self.k not in quant.SUPPORTED_BITS:
                raise ValueError(f"k must be one of {quant.SUPPORTED_BITS}")
        if self.group_size < 0:
            raise ValueError("group size must be >= 0 (0 means one group per tensor)")
        if self.kind == "hadamard_then_nearest_kbit":
            if self.block < 2 or self.block & (self.block - 1):
                raise ValueError("Hadamard block must be a power of two")
            if self.group_size % self.block:
                raise ValueError(
                    f"group size {self.group_size} must be divisible by the Hadamard block {self.block}"
                )

    @property
    def deterministic(self) -> bool:
        return self.kind != "stochastic_kbit"

    @property
    def unbiased(self) -> bool:
        return self.kind in UNBIASED_KINDS


IDENTITY = CompressorSpec("identity")


def _group(spec: CompressorSpec, n: int) -> int:
    return spec.group_size or max(n, 1)


def compress(spec: CompressorSpec, v, rng: SeededRng | None = None) -> np.ndarray:
    v = as_flat(v)
    if v.size == 0:
        return v.copy()
    kind = spec.kind
    if kind == "identity":
        out = v.copy()
    elif kind == "nearest_kbit":
        out = quant.fake_quantize(v, spec.k, _group(spec, v.size))
    elif kind == "stochastic_kbit":
        if rng is None:
            raise ValueError("stochastic compressor needs an rng stream")
        out = quant.fake_quantize(v, spec.k, _group(spec, v.size), rng=rng)
    elif kind == "ternary_nearest":
        # nearest point of {-1, 0, 1} * max|v| per group
        q, s = quant.scaled_codes(v, 1, _group(spec, v.size))
        out = quant.dequantize_codes(q, s, 1, _group(spec, v.size))
    else:
        if v.size % spec.block:
            raise ValueError(f"length {v.size} is not a multiple of the Hadamard block {spec.block}")
        h = fwht_blockwise(v, spec.block)
        h = quant.fake_quantize(h, spec.k, _group(spec, v.size))
        out = fwht_blockwise(h, spec.block)
    if spec.post_scale != 1.0:
        out = (out * np.float32(spec.post_scale)).astype(np.float32)
    return out


def to_biased(spec: CompressorSpec, kappa: float) -> CompressorSpec:
    """Scale an unbiased compressor by ``1/(1+kappa)``; the result is ``1/(1+kappa)``-approximate."""
    return replace(spec, post_scale=1.0 / (1.0 + kappa))


@dataclass(frozen=True)
class InputDist:
    """Where estimator inputs come from: ``gaussian``, ``spiky`` or ``replay``."""

    kind: str = "gaussian"
    n: int = 1024
    spike_prob: float = 0.01
    spike_scale: float = 50.0
    samples: tuple = field(default=(), repr=False)

    def draw(self, i: int, rng: SeededRng) -> np.ndarray:
        if self.kind == "gaussian":
            return fill_gaussian(rng, self.n)
        if self.kind == "spiky":
            return fill_spiky(rng, self.n, self.spike_prob, self.spike_scale)
        if self.kind == "replay":
            return as_flat(self.samples[i % len(self.samples)])
        raise ValueError(f"unknown distribution kind {self.kind!r}")


@dataclass
class CompressorStats:
    kappa_hat: float = 0.0
    delta_hat: float = 1.0
    trials: int = 0
    bias_norm: float = 0.0
    # worst standardized chi-square statistic of the per-element bias; |z| < 3 is "consistent with zero"
    bias_z: float = 0.0
    samples: int = 0


def _moments(spec, v, trials, rng, batch=4096):
    """Mean of ``C(v)`` and mean squared error over ``trials`` resamples, plus per-element variance."""
    n = v.size
    total = np.zeros(n)
    total_sq = np.zeros(n)
    err_sq = 0.0
    done = 0
    while done < trials:
        m = min(batch, trials - done)
        if spec.kind == "stochastic_kbit":
            rows = np.broadcast_to(v, (m, n))
            g = _group(spec, n)
            out = quant.fake_quantize(rows, spec.k, g, rng=rng)
            if spec.post_scale != 1.0:
                out = out * np.float32(spec.post_scale)
            out = out.astype(np.float64)
        else:
            out = np.broadcast_to(compress(spec, v, rng).astype(np.float64), (m, n))
        diff = out - v
        total += out.sum(axis=0)
        total_sq += (out * out).sum(axis=0)
        err_sq += float((diff * diff).sum())
        done += m
    mean = total / trials
    var = np.maximum(total_sq / trials - mean * mean, 0.0)
    return mean, err_sq / trials, var


def _estimate(spec, dist, trials, rng, samples):
    if trials < 1:
        raise ValueError("trials must be >= 1")
    worst_ratio, worst_bias, worst_z, used = 0.0, 0.0, 0.0, 0
    for i in range(samples):
        v = dist.draw(i, rng.spawn(i)).astype(np.float64)
        vv = float(v @ v)
        if vv == 0.0:
            continue
        used += 1
        mean, mse, var = _moments(spec, v.astype(np.float32), trials, rng.spawn(i, 1))
        worst_ratio = max(worst_ratio, mse / vv)
        bias = mean - v
        worst_bias = max(worst_bias, float(np.linalg.norm(bias)) / np.sqrt(vv))
        live = var > 0
        if live.any() and trials > 1:
            chi2 = float((bias[live] ** 2 / (var[live] / trials)).sum())
            dof = int(live.sum())
            worst_z = max(worst_z, (chi2 - dof) / np.sqrt(2 * dof), key=abs)
    return worst_ratio, worst_bias, worst_z, used


def estimate_kappa(spec, dist: InputDist, trials: int, rng: SeededRng, samples: int = 8) -> CompressorStats:
    """Worst observed ``E||U(v)-v||^2 / ||v||^2`` over ``samples`` inputs, ``trials`` resamples each."""
    if not spec.unbiased:
        raise ValueError(f"{spec.kind} is not an unbiased compressor")
    ratio, bias, z, used = _estimate(spec, dist, trials, rng, samples)
    return CompressorStats(
        kappa_hat=ratio,
        delta_hat=min(max(1.0 - ratio, 0.0), 1.0),
        trials=trials,
        bias_norm=bias,
        bias_z=z,
        samples=used,
    )


def estimate_delta(spec, dist: InputDist, trials: int, rng: SeededRng, samples: int = 8) -> CompressorStats:
    """``1 - `` worst observed ``E||C(v)-v||^2 / ||v||^2``, clamped to [0, 1]."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if spec.deterministic:
        trials_used = 1
    else:
        trials_used = trials
    ratio, bias, z, used = _estimate(spec, dist, trials_used, rng, samples)
    return CompressorStats(
        kappa_hat=ratio,
        delta_hat=min(max(1.0 - ratio, 0.0), 1.0),
        trials=trials,
        bias_norm=bias,
        bias_z=z,
        samples=used,
    )
