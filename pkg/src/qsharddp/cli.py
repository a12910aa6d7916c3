"""Command-line front end.

Subcommands: train, ablate, counterexample, certify, reduce-bench, comm-cost.
Every command takes an optional ``--config FILE`` of ``key = value`` lines;
flags given on the command line override the file. ``--seed`` is mandatory
wherever randomness is involved.

Exit codes: 0 success, 1 runtime error, 2 usage error, 3 diverged run.
Errors are reported on stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace

import numpy as np

from . import __version__, quant
from .collectives import ClusterTopology, ReduceConfig, exact_reduce_scatter, reduce_scatter
from .compressors import CompressorSpec, InputDist, estimate_delta, estimate_kappa
from .core import STREAM_TRIALS, SeededRng, fill_spiky
from .costmodel import ByteLedger, comm_bits_per_param, estimate_time
from .tasks import TASK_KINDS
from .train import PRESETS, TRACE_COLUMNS, TrainConfig, relative_gap, run_counterexample, train_run

SCHEMA_VERSION = 1
EXIT_ERROR, EXIT_USAGE, EXIT_DIVERGED = 1, 2, 3
REDUCE_BENCH_MODES = ("ring4", "ULq", "TLq", "TLq-HS")
CSV_TO_STDOUT = ("train", "ablate", "reduce-bench")


def fmt(v) -> str:
    """9 significant digits for floats; integers verbatim."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return str(v)


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def read_config(path: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


class UsageError(Exception):
    pass


def write_csv(path, command, resolved: dict, header, rows):
    """Comment stanza with the resolved config, then a header row and data rows."""
    own = path not in (None, "-")
    f = open(path, "w", newline="") if own else sys.stdout
    try:
        f.write(f"# qsharddp {command} schema={SCHEMA_VERSION} version={__version__}\n")
        for key in sorted(resolved):
            f.write(f"# {key}={fmt(resolved[key])}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(row[c]) for c in header])
    finally:
        if own:
            f.close()


def summary(args, text: str):
    # keep stdout clean when it carries the CSV
    to_stdout = args.cmd in CSV_TO_STDOUT and args.out in (None, "-")
    print(text, file=sys.stderr if to_stdout else sys.stdout)


def task_options(pairs) -> tuple:
    opts = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--task-opt expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        opts[k.strip()] = parse_value(v)
    return tuple(sorted(opts.items()))


def train_config(args, preset=None, seed=None) -> TrainConfig:
    return TrainConfig(
        task=args.task,
        preset=preset or args.preset,
        P=args.P,
        N=args.N,
        T=args.T,
        eta=args.eta,
        momentum=args.momentum,
        seed=args.seed if seed is None else seed,
        grad_group=args.grad_group,
        weight_group=args.weight_group,
        weight_bits=args.weight_bits,
        block=args.block,
        eval_interval=args.eval_interval,
        threads=args.threads,
        wire=args.wire,
        task_options=task_options(args.task_opt),
    )


def cmd_train(args) -> int:
    cfg = train_config(args)
    trace = train_run(cfg)
    write_csv(args.out, "train", trace.config, TRACE_COLUMNS, trace.rows)
    if args.dump:
        dump_weights(args.dump, trace, cfg)
    summary(
        args,
        f"train task={cfg.task} preset={cfg.preset} seed={cfg.seed} iters={len(trace.rows)} "
        f"final_val_loss={fmt(trace.final_val_loss)} intra_bytes={trace.ledger.intra_bytes} "
        f"inter_bytes={trace.ledger.inter_bytes} diverged={fmt(trace.diverged)}",
    )
    if trace.diverged:
        return diverged(trace.message)
    return 0


def dump_weights(path, trace, cfg):
    """Final model weights as a stream of quantized chunks, one per rank shard."""
    w = trace.final_weights
    shards = w.reshape(cfg.P, -1)
    with open(path, "wb") as f:
        for row in shards:
            f.write(quant.wire_encode(quant.quantize(row, cfg.weight_bits, cfg.weight_group)))


def cmd_ablate(args) -> int:
    presets = args.presets.split(",")
    for p in presets:
        if p not in PRESETS:
            raise UsageError(f"unknown preset {p!r}; choose from {sorted(PRESETS)}")
    if "baseline" not in presets:
        presets = ["baseline"] + presets
    rows, failed = [], []
    for i in range(args.seeds):
        seed = args.seed + i
        base = None
        for p in presets:
            trace = train_run(train_config(args, preset=p, seed=seed))
            if p == "baseline":
                base = trace.final_val_loss
            if trace.diverged:
                failed.append(f"{p}/seed{seed}")
            rows.append(
                dict(
                    preset=p,
                    seed=seed,
                    final_val_loss=trace.final_val_loss,
                    gap=relative_gap(trace.final_val_loss, base),
                    diverged=trace.diverged,
                    intra_bytes=trace.ledger.intra_bytes,
                    inter_bytes=trace.ledger.inter_bytes,
                )
            )
    resolved = train_config(args, preset="baseline").resolved()
    resolved.pop("preset")
    resolved.update(presets=",".join(presets), seeds=args.seeds)
    header = ("preset", "seed", "final_val_loss", "gap", "diverged", "intra_bytes", "inter_bytes")
    write_csv(args.out, "ablate", resolved, header, rows)
    means = []
    for p in presets:
        gaps = [r["gap"] for r in rows if r["preset"] == p]
        means.append(f"{p}={fmt(float(np.mean(np.abs(gaps))))}")
    summary(args, "ablate mean_abs_gap " + " ".join(means))
    if failed:
        return diverged("diverged runs: " + ",".join(failed))
    return 0


def cmd_counterexample(args) -> int:
    w, traj = run_counterexample(args.mode, args.eta, args.T, args.seed)
    stuck = bool((traj == traj[0]).all())
    if args.out:
        rows = [dict(iter=i, w1=float(a), w2=float(b)) for i, (a, b) in enumerate(traj)]
        resolved = dict(mode=args.mode, eta=args.eta, T=args.T, seed=args.seed)
        write_csv(args.out, "counterexample", resolved, ("iter", "w1", "w2"), rows)
    print(
        f"counterexample mode={args.mode} eta={fmt(args.eta)} T={args.T} seed={args.seed} "
        f"final_w=({fmt(float(w[0]))},{fmt(float(w[1]))}) norm={fmt(float(np.linalg.norm(w.astype(np.float64))))} "
        f"stuck={fmt(stuck)}"
    )
    return 0


def cmd_certify(args) -> int:
    spec = CompressorSpec(args.kind, k=args.k, group_size=args.group, block=args.block)
    if args.post_scale is not None:
        spec = replace(spec, post_scale=args.post_scale)
    dist = InputDist(args.dist, n=args.n, spike_prob=args.spike_prob, spike_scale=args.spike_scale)
    rng = SeededRng(args.seed, (STREAM_TRIALS,))
    if spec.unbiased and spec.post_scale == 1.0:
        stats = estimate_kappa(spec, dist, args.trials, rng, args.samples)
    else:
        stats = estimate_delta(spec, dist, args.trials, rng, args.samples)
    row = dict(
        kind=spec.kind,
        k=spec.k,
        group=spec.group_size,
        kappa_hat=stats.kappa_hat,
        delta_hat=stats.delta_hat,
        bias_norm=stats.bias_norm,
        bias_z=stats.bias_z,
        trials=stats.trials,
        samples=stats.samples,
    )
    if args.out:
        resolved = dict(vars(args))
        for key in ("cmd", "config", "func", "out"):
            resolved.pop(key, None)
        write_csv(args.out, "certify", resolved, tuple(row), [row])
    print("certify " + " ".join(f"{k}={fmt(v)}" for k, v in row.items()))
    return 0


def cmd_reduce_bench(args) -> int:
    topo = ClusterTopology(args.P, args.N)
    modes = args.modes.split(",")
    for m in modes:
        if m not in REDUCE_BENCH_MODES:
            raise UsageError(f"unknown mode {m!r}; choose from {REDUCE_BENCH_MODES}")
    cfgs = {m: ReduceConfig.preset(m, args.group, args.block) for m in modes}
    unit = topo.P * args.group
    if "TLq-HS" in cfgs:
        unit = int(np.lcm(unit, topo.P * args.block))
    d = -(-args.d // unit) * unit
    root = SeededRng(args.seed, (STREAM_TRIALS,))
    errors = {m: [] for m in modes}
    ledgers = {m: ByteLedger() for m in modes}
    for trial in range(args.trials):
        g = fill_spiky(root.spawn(trial), topo.P * d, args.spike_prob, args.spike_scale).reshape(topo.P, d)
        exact = exact_reduce_scatter(topo, g).astype(np.float64)
        for m in modes:
            out = reduce_scatter(topo, g, cfgs[m], ledger=ledgers[m] if trial == 0 else None, wire=args.wire)
            errors[m].append(float(np.linalg.norm(out - exact)))
    rows = []
    for m in modes:
        e = np.array(errors[m])
        lg = ledgers[m]
        rows.append(
            dict(
                mode=m,
                median_error=float(np.median(e)),
                mean_error=float(e.mean()),
                max_error=float(e.max()),
                intra_bits_per_param=lg.bits_per_param("intra"),
                inter_bits_per_param=lg.bits_per_param("inter"),
                time_sequential=estimate_time(lg, topo, "sequential"),
                time_overlapped=estimate_time(lg, topo, "overlapped"),
            )
        )
    resolved = {k: v for k, v in vars(args).items() if k not in ("cmd", "config", "func", "out")}
    resolved["d_padded"] = d
    write_csv(args.out, "reduce-bench", resolved, tuple(rows[0]), rows)
    summary(args, "reduce-bench median_error " + " ".join(f"{r['mode']}={fmt(r['median_error'])}" for r in rows))
    return 0


def cmd_comm_cost(args) -> int:
    group = float("inf") if args.group == 0 else args.group
    print(fmt(comm_bits_per_param(args.k, group, args.scale_bits)))
    return 0


def diverged(message: str) -> int:
    print(json.dumps({"error": "diverged", "message": message}), file=sys.stderr)
    return EXIT_DIVERGED


def positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def add_common(p, seed=True):
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    if seed:
        p.add_argument("--seed", type=int, default=None, help="required")


def add_train_args(p):
    p.add_argument("--task", choices=TASK_KINDS, default="tiny_mlp")
    p.add_argument("--P", type=positive_int, default=16, help="number of ranks")
    p.add_argument("--N", type=positive_int, default=4, help="ranks per node")
    p.add_argument("--T", type=positive_int, default=2000, help="iterations")
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--grad-group", type=positive_int, default=128)
    p.add_argument("--weight-group", type=positive_int, default=2048)
    p.add_argument("--weight-bits", type=int, choices=(4, 8), default=4)
    p.add_argument("--block", type=positive_int, default=32, help="Hadamard block size")
    p.add_argument("--eval-interval", type=positive_int, default=100)
    p.add_argument("--threads", type=positive_int, default=1)
    p.add_argument("--wire", type=parse_bool, nargs="?", const=True, default=False,
                   help="serialize every message through the wire format")
    p.add_argument("--task-opt", action="append", metavar="KEY=VALUE", help="task constructor option (repeatable)")
    p.add_argument("--out", default="-", help="CSV path ('-' for stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsharddp", description="Simulated compressed sharded data-parallel training.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="run one training configuration and write its trace")
    add_common(p)
    add_train_args(p)
    p.add_argument("--preset", choices=sorted(PRESETS), default="full")
    p.add_argument("--dump", help="write final weights as quantized wire-format chunks to this file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run several presets over consecutive seeds and tabulate loss gaps")
    add_common(p)
    add_train_args(p)
    p.add_argument("--presets", default="baseline,qW,qWD,ULq,TLq,TLq-HS,full")
    p.add_argument("--seeds", type=positive_int, default=3, help="number of consecutive seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("counterexample", help="2-D least squares with a ternary quantizer")
    add_common(p)
    p.add_argument("--mode", choices=("none", "qW", "qWD"), default="qW")
    p.add_argument("--eta", type=float, default=0.1)
    p.add_argument("--T", type=positive_int, default=1000)
    p.add_argument("--out", help="optional trajectory CSV")
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("certify", help="Monte Carlo kappa/delta estimates for a compressor")
    add_common(p)
    p.add_argument("--kind", choices=("identity", "nearest_kbit", "stochastic_kbit", "ternary_nearest",
                                      "hadamard_then_nearest_kbit"), default="stochastic_kbit")
    p.add_argument("--k", type=int, choices=(4, 8), default=4)
    p.add_argument("--group", type=int, default=128, help="group size (0 = whole vector)")
    p.add_argument("--block", type=positive_int, default=32)
    p.add_argument("--post-scale", type=float, default=None)
    p.add_argument("--dist", choices=("gaussian", "spiky"), default="gaussian")
    p.add_argument("--n", type=positive_int, default=1024)
    p.add_argument("--spike-prob", type=float, default=0.01)
    p.add_argument("--spike-scale", type=float, default=50.0)
    p.add_argument("--trials", type=positive_int, default=1000)
    p.add_argument("--samples", type=positive_int, default=8)
    p.add_argument("--out", help="optional one-row CSV")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("reduce-bench", help="compare reduce-scatter error against the exact average")
    add_common(p)
    p.add_argument("--P", type=positive_int, default=16)
    p.add_argument("--N", type=positive_int, default=4)
    p.add_argument("--d", type=positive_int, default=8192, help="gradient length (rounded up to alignment)")
    p.add_argument("--modes", default=",".join(REDUCE_BENCH_MODES))
    p.add_argument("--group", type=positive_int, default=128)
    p.add_argument("--block", type=positive_int, default=32)
    p.add_argument("--trials", type=positive_int, default=200)
    p.add_argument("--spike-prob", type=float, default=0.01)
    p.add_argument("--spike-scale", type=float, default=50.0)
    p.add_argument("--wire", type=parse_bool, nargs="?", const=True, default=False)
    p.add_argument("--out", default="-", help="CSV path ('-' for stdout)")
    p.set_defaults(func=cmd_reduce_bench)

    p = sub.add_parser("comm-cost", help="wire bits per element for group-wise quantization")
    add_common(p, seed=False)
    p.add_argument("--k", type=int, choices=(4, 8, 16, 32), default=4)
    p.add_argument("--group", type=int, default=128, help="group size (0 = no scale overhead)")
    p.add_argument("--scale-bits", type=int, choices=(16, 32), default=32)
    p.set_defaults(func=cmd_comm_cost)
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = _subparser(parser, args.cmd)
    if args.config:
        try:
            values = read_config(args.config)
        except (OSError, ValueError) as exc:
            sub.error(str(exc))
        known = {a.dest for a in sub._actions}
        opts = [v for k, v in values.items() if k.startswith("task.")]
        extra = [f"{k[5:]}={v}" for k, v in values.items() if k.startswith("task.")]
        values = {k: v for k, v in values.items() if not k.startswith("task.")}
        unknown = sorted(set(values) - known - {"config", "help"})
        if unknown:
            sub.error(f"unknown config key(s) in {args.config}: {', '.join(unknown)}")
        if opts and "task_opt" not in known:
            sub.error(f"task options are not accepted by {args.cmd}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
        if extra:
            # flags win: file options only fill keys not given with --task-opt
            given = {item.split("=", 1)[0] for item in args.task_opt or ()}
            args.task_opt = [e for e in extra if e.split("=", 1)[0] not in given] + list(args.task_opt or ())
    if hasattr(args, "seed") and args.seed is None:
        sub.error("--seed is required (on the command line or in the config file)")
    return args, sub


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args, sub = parse(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        sub.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
