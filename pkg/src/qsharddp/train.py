"""Compressed SGD: the single-worker loop and the sharded data-parallel iteration.

Main weights ``w_main`` are the optimizer's full-precision copy; model weights
``w_model`` are what forward/backward sees. Each step compresses the gradient
before the update and then moves ``w_model`` by a compressed version of
``w_main - w_model``. In the sharded version rank ``p`` owns shard ``p`` of
``w_main`` and every rank keeps a full ``w_model`` replica.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import quant
from .collectives import ClusterTopology, ReduceConfig, all_gather, reduce_scatter
from .compressors import IDENTITY, CompressorSpec, compress
from .core import STREAM_GRAD_COMPRESS, STREAM_WDIFF_COMPRESS, SeededRng
from .costmodel import ByteLedger
from .tasks import CounterexampleTask, ModelTask, make_task

log = logging.getLogger(__name__)

WEIGHT_MODES = ("lossless", "qW", "qWD")
PRESETS = {
    # name: (weight channel, gradient reduce preset)
    "baseline": ("lossless", "exact"),
    "qW": ("qW", "exact"),
    "qWD": ("qWD", "exact"),
    "ULq": ("lossless", "ULq"),
    "TLq": ("lossless", "TLq"),
    "TLq-HS": ("lossless", "TLq-HS"),
    "full": ("qWD", "TLq-HS"),
}
COUNTEREXAMPLE_MAX_ETA = 0.125
DIVERGENCE_LOSS = 1e6


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainState:
    w_main: np.ndarray
    w_model: np.ndarray
    eta: float
    t: int = 0

    @classmethod
    def start(cls, w0, eta):
        w0 = np.asarray(w0, dtype=np.float32)
        return cls(w0.copy(), w0.copy(), eta)


def compressed_sgd_step(
    state: TrainState,
    task: ModelTask,
    grad_c: CompressorSpec,
    wdiff_c: CompressorSpec,
    rng: SeededRng | None = None,
    batch=None,
) -> TrainState:
    """One iteration of SGD with gradient and weight-difference compression.

    ``rng`` feeds stochastic compressors (sub-streams per channel and step);
    ``batch`` overrides the sampled minibatch.
    """
    if state.eta <= 0:
        raise ValueError("learning rate must be positive")
    if batch is None:
        batch = task.sample(0, state.t)
    g = task.grad(state.w_model, batch)
    if not np.isfinite(g).all():
        raise DivergenceError(f"non-finite gradient at step {state.t}")
    grng = rng.spawn(STREAM_GRAD_COMPRESS, state.t) if rng is not None else None
    g = compress(grad_c, g, grng)
    w_main = (state.w_main - np.float32(state.eta) * g).astype(np.float32)
    if wdiff_c.kind == "identity":
        # w_model + (w_main - w_model) is not always w_main in floating point
        w_model = w_main.copy()
    else:
        wrng = rng.spawn(STREAM_WDIFF_COMPRESS, state.t) if rng is not None else None
        w_model = state.w_model + compress(wdiff_c, w_main - state.w_model, wrng)
    return TrainState(w_main, w_model.astype(np.float32), state.eta, state.t + 1)


def run_counterexample(mode: str, eta: float = 0.1, T: int = 1000, seed: int = 0):
    """SGD on the 2-D least-squares counterexample with a ternary quantizer.

    ``mode``: ``none`` (plain SGD), ``qW`` (quantize the weights after every
    step) or ``qWD`` (quantize the weight difference). Returns the final
    model weights and the ``(T+1, 2)`` trajectory of model weights.
    """
    if mode not in ("none", "qW", "qWD"):
        raise ValueError(f"unknown mode {mode!r}")
    if not 0 < eta < COUNTEREXAMPLE_MAX_ETA:
        raise ValueError(f"learning rate must be in (0, {COUNTEREXAMPLE_MAX_ETA}), got {eta}")
    if T < 1:
        raise ValueError("T must be >= 1")
    task = CounterexampleTask(seed)
    ternary = CompressorSpec("ternary_nearest", group_size=0)
    state = TrainState.start(task.init_params(), eta)
    traj = [state.w_model.copy()]
    for _ in range(T):
        if mode == "qWD":
            state = compressed_sgd_step(state, task, IDENTITY, ternary)
        else:
            state = compressed_sgd_step(state, task, IDENTITY, IDENTITY)
            if mode == "qW":
                w = compress(ternary, state.w_main)
                state = TrainState(w, w.copy(), eta, state.t)
        traj.append(state.w_model.copy())
    return state.w_model, np.array(traj)


@dataclass
class ShardedState:
    main: np.ndarray  # (P, S): row p is the shard owned by rank p
    replicas: np.ndarray  # (P, D): every rank's model weights
    momentum: np.ndarray
    t: int = 0

    @classmethod
    def start(cls, w0: np.ndarray, P: int):
        w0 = np.asarray(w0, dtype=np.float32)
        return cls(w0.reshape(P, -1).copy(), np.tile(w0, (P, 1)), np.zeros((P, w0.size // P), np.float32))

    def w_main(self) -> np.ndarray:
        return self.main.reshape(-1)


@dataclass(frozen=True)
class ShardedConfig:
    eta: float = 0.1
    momentum: float = 0.0
    weights: str = "lossless"
    weight_bits: int = 4
    weight_group: int = 2048
    reduce: ReduceConfig = field(default_factory=lambda: ReduceConfig.preset("exact"))

    def __post_init__(self):
        if self.weights not in WEIGHT_MODES:
            raise ValueError(f"weight mode must be one of {WEIGHT_MODES}")


def padded_dim(d: int, topo: ClusterTopology, cfg: ShardedConfig) -> int:
    m = cfg.reduce.alignment(topo)
    if cfg.reduce.hadamard:
        m = math.lcm(m, topo.P * cfg.reduce.block)
    return -(-d // m) * m


@dataclass
class StepRecord:
    train_loss: float
    grad_norm_sq: float
    relq_diff: float
    relq_weight: float
    e_norm: float


def sharded_iteration(
    topo: ClusterTopology,
    state: ShardedState,
    task: ModelTask,
    cfg: ShardedConfig,
    ledger: ByteLedger | None = None,
    pool: ThreadPoolExecutor | None = None,
    wire: bool = False,
) -> tuple[ShardedState, StepRecord]:
    """Forward/backward on every rank, gradient reduce-scatter, shard update, weight all-gather."""
    P = topo.P
    D = state.replicas.shape[1]
    d = task.d
    t = state.t

    def local(rank):
        return task.loss_grad(state.replicas[rank, :d], task.sample(rank, t))

    results = list(pool.map(local, range(P))) if pool is not None else [local(r) for r in range(P)]
    grads = np.zeros((P, D), dtype=np.float32)
    for r, (_, g) in enumerate(results):
        grads[r, :d] = g
    if not np.isfinite(grads).all():
        raise DivergenceError(f"non-finite gradient at step {t}")
    train_loss = float(np.mean([loss for loss, _ in results]))
    mean_grad = grads.astype(np.float64).mean(axis=0)

    shards = reduce_scatter(topo, grads, cfg.reduce, ledger=ledger, wire=wire)
    S = shards.shape[1]
    flat = shards.reshape(-1)
    flat[d:] = 0.0  # Hadamard round trips leak rounding noise into padding

    eta = np.float32(cfg.eta)
    main = state.main.copy()
    mom = state.momentum.copy()
    for p in range(P):
        if cfg.momentum:
            mom[p] = np.float32(cfg.momentum) * mom[p] + shards[p]
            main[p] = main[p] - eta * mom[p]
        else:
            main[p] = main[p] - eta * shards[p]

    own_model = np.stack([state.replicas[p, p * S : (p + 1) * S] for p in range(P)])
    diff = main - own_model
    wnorm = float(np.linalg.norm(main.astype(np.float64)))
    k, G = cfg.weight_bits, cfg.weight_group
    relq_diff = float(np.linalg.norm(quant.fake_quantize(diff, k, G) - diff)) / wnorm if wnorm else 0.0
    relq_weight = float(np.linalg.norm(quant.fake_quantize(main, k, G) - main)) / wnorm if wnorm else 0.0

    if cfg.weights == "lossless":
        gathered = all_gather(topo, [main[p] for p in range(P)], ledger, wire)
        replicas = np.stack(gathered)
    elif cfg.weights == "qW":
        gathered = all_gather(topo, [quant.quantize(main[p], k, G) for p in range(P)], ledger, wire)
        replicas = np.stack(gathered)
    else:
        gathered = all_gather(topo, [quant.quantize(diff[p], k, G) for p in range(P)], ledger, wire)
        replicas = (state.replicas + np.stack(gathered)).astype(np.float32)

    e_norm = float(np.linalg.norm(main.reshape(-1).astype(np.float64) - replicas[0]))
    rec = StepRecord(train_loss, float(mean_grad @ mean_grad), relq_diff, relq_weight, e_norm)
    return ShardedState(main, replicas, mom, t + 1), rec


TRACE_COLUMNS = (
    "iter",
    "train_loss",
    "val_loss",
    "grad_norm_sq",
    "relq_diff",
    "relq_weight",
    "e_norm",
    "intra_bytes",
    "inter_bytes",
)


@dataclass(frozen=True)
class TrainConfig:
    task: str = "tiny_mlp"
    preset: str = "baseline"
    P: int = 16
    N: int = 4
    T: int = 2000
    eta: float = 0.1
    momentum: float = 0.0
    seed: int = 0
    grad_group: int = 128
    weight_group: int = 2048
    weight_bits: int = 4
    block: int = 32
    eval_interval: int = 100
    threads: int = 1
    wire: bool = False
    task_options: tuple = ()

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.T < 1 or self.eval_interval < 1 or self.threads < 1:
            raise ValueError("T, eval_interval and threads must be >= 1")
        if self.eta <= 0:
            raise ValueError("learning rate must be positive")

    def sharded(self) -> ShardedConfig:
        weights, reduce_name = PRESETS[self.preset]
        return ShardedConfig(
            eta=self.eta,
            momentum=self.momentum,
            weights=weights,
            weight_bits=self.weight_bits,
            weight_group=self.weight_group,
            reduce=ReduceConfig.preset(reduce_name, self.grad_group, self.block),
        )

    def resolved(self) -> dict:
        """Everything that determines the results; ``threads`` only changes scheduling."""
        out = asdict(self)
        out.pop("threads")
        out["task_options"] = dict(self.task_options)
        return out


@dataclass
class TrainTrace:
    config: dict
    rows: list = field(default_factory=list)
    final_val_loss: float = float("nan")
    diverged: bool = False
    message: str = ""
    ledger: ByteLedger = field(default_factory=ByteLedger)
    final_weights: np.ndarray | None = field(default=None, repr=False)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=np.float64)


def train_run(config: TrainConfig, task: ModelTask | None = None) -> TrainTrace:
    """Run ``config.T`` iterations and record one trace row per iteration."""
    topo = ClusterTopology(config.P, config.N)
    if task is None:
        task = make_task(config.task, config.seed, config.P, **dict(config.task_options))
    else:
        task.reset_sampling()
    scfg = config.sharded()
    D = padded_dim(task.d, topo, scfg)
    w0 = np.zeros(D, dtype=np.float32)
    w0[: task.d] = task.init_params()
    state = ShardedState.start(w0, topo.P)
    ledger = ByteLedger()
    trace = TrainTrace(config.resolved())
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for t in range(config.T):
            before = (ledger.intra_bytes, ledger.inter_bytes)
            try:
                state, rec = sharded_iteration(topo, state, task, scfg, ledger, pool, config.wire)
            except DivergenceError as exc:
                trace.diverged, trace.message = True, str(exc)
                break
            val = float("nan")
            last = t == config.T - 1
            if (t + 1) % config.eval_interval == 0 or last:
                val = task.val_loss(state.replicas[0, : task.d])
            trace.rows.append(
                dict(
                    iter=t + 1,
                    train_loss=rec.train_loss,
                    val_loss=val,
                    grad_norm_sq=rec.grad_norm_sq,
                    relq_diff=rec.relq_diff,
                    relq_weight=rec.relq_weight,
                    e_norm=rec.e_norm,
                    intra_bytes=ledger.intra_bytes - before[0],
                    inter_bytes=ledger.inter_bytes - before[1],
                )
            )
            if not math.isfinite(rec.train_loss) or rec.train_loss > DIVERGENCE_LOSS:
                trace.diverged = True
                trace.message = f"loss {rec.train_loss!r} at step {t + 1}"
                break
            if last:
                trace.final_val_loss = val
    finally:
        if pool is not None:
            pool.shutdown()
    if trace.diverged:
        log.warning("run diverged: %s", trace.message)
    trace.ledger = ledger
    trace.final_weights = state.main.reshape(-1).copy()
    return trace


def relative_gap(loss: float, baseline: float) -> float:
    return (loss - baseline) / baseline
