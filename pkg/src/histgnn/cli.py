"""Command line surface: train, sweep, sgc, and comms subcommands.

Every command is deterministic under --seed and exits 0 only when all
validation and the run itself succeed. Machine-readable results go to
stdout as JSON; per-iteration or per-cell tables go to --metrics-out as CSV.
"""

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .comms import (
    DeviceTopology,
    FetchMode,
    merge_transfers,
    partition_features,
    parse_topology,
    plan_rounds,
    requests_for_batch,
    simulate_fetch,
)
from .data import ingest, synth_graph
from .graphs import build_csr2, normalize_adjacency
from .nn import LayerKind
from .sgc import (
    convergence_bound,
    estimate_lipschitz,
    propagate,
    run_convergence,
)
from .trainer import (
    TrainConfig,
    Trainer,
    evaluate,
    io_saving,
    write_metrics_csv,
)

REAL_FANOUTS = (20, 15, 10)
SYNTH_FANOUTS = (5, 5, 5)
SWEEP_P_GRADS = "0,0.5,0.9,1.0"
SWEEP_T_STALES = "0,10,50,inf"


# ------------------------------------------------------------ arg parsing


def parse_fanouts(text):
    try:
        fanouts = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ValueError(f"--fanouts expects comma-separated ints, got {text!r}")
    if not fanouts or any(f < 1 for f in fanouts):
        raise ValueError(f"fanouts must be positive, got {text!r}")
    return fanouts


def parse_t_stale(text):
    if text.strip().lower() in ("inf", "infinity"):
        return math.inf
    try:
        return int(text)
    except ValueError:
        raise ValueError(f"--t-stale expects an int or 'inf', got {text!r}")


def parse_synth_spec(text):
    """MODEL:k=v,... with n= giving the node count (default 2000)."""
    model, _, rest = text.partition(":")
    if not model:
        raise ValueError(f"--synth expects MODEL[:k=v,...], got {text!r}")
    params = {}
    for item in filter(None, rest.split(",")):
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--synth parameter {item!r} is not k=v")
        for cast in (int, float):
            try:
                value = cast(value)
                break
            except ValueError:
                continue
        params[key.strip()] = value
    n = params.pop("n", 2000)
    return model, int(n), params


def load_dataset(args):
    if (args.dataset is None) == (args.synth is None):
        raise ValueError("pass exactly one of --dataset DIR or --synth SPEC")
    if args.dataset is not None:
        return ingest(args.dataset), False
    model, n, params = parse_synth_spec(args.synth)
    return synth_graph(n, model, params, rng=args.seed), True


def resolve_fanouts(args, synthetic):
    default = SYNTH_FANOUTS if synthetic else REAL_FANOUTS
    fanouts = args.fanouts if args.fanouts is not None else default
    if args.layers is not None:
        if args.fanouts is not None and len(fanouts) != args.layers:
            raise ValueError(
                f"--layers {args.layers} contradicts --fanouts of length"
                f" {len(fanouts)}"
            )
        # pad with the deepest fanout or truncate to the requested depth
        fanouts = (fanouts + fanouts[-1:] * args.layers)[: args.layers]
    return tuple(fanouts)


def build_train_config(args, synthetic, p_grad=None, t_stale=None):
    kind = LayerKind.SAGE_MEAN if args.kind == "sage" else LayerKind.GCN
    return TrainConfig(
        fanouts=resolve_fanouts(args, synthetic),
        hidden=args.hidden,
        batch_size=args.batch_size,
        epochs=args.epochs,
        eta=args.eta,
        kind=kind,
        p_grad=args.p_grad if p_grad is None else p_grad,
        t_stale=args.t_stale if t_stale is None else t_stale,
        capacity=args.cache_capacity,
        feature_rows=args.feature_rows,
        seed=args.seed,
        probe_every=args.probe_every,
    )


def add_data_flags(p):
    p.add_argument("--dataset", help="dataset directory to ingest")
    p.add_argument("--synth", help="synthetic spec, e.g. sbm:n=2000,blocks=8")
    p.add_argument("--seed", type=int, default=0)


def add_train_flags(p):
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--fanouts", type=parse_fanouts, default=None, metavar="A,B,C")
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--kind", choices=("gcn", "sage"), default="gcn")
    p.add_argument("--p-grad", type=float, default=0.9)
    p.add_argument("--t-stale", type=parse_t_stale, default=20)
    p.add_argument("--cache-capacity", type=int, default=None)
    p.add_argument("--feature-rows", type=int, default=None)
    p.add_argument("--probe-every", type=int, default=0, metavar="K")


def emit(summary, args):
    text = json.dumps(summary, indent=2, sort_keys=True)
    print(text)
    if getattr(args, "summary_out", None):
        with open(args.summary_out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


# ------------------------------------------------------------------ train


def run_training(ds, cfg):
    graph = build_csr2(ds.graph)
    trainer = Trainer(
        graph, ds.features, ds.labels, ds.train_ids, cfg, ds.num_classes
    )
    metrics = trainer.train()
    accuracy = evaluate(
        trainer.network, graph, ds.features, ds.labels, ds.test_ids
    )
    return trainer, metrics, accuracy


def cmd_train(args):
    ds, synthetic = load_dataset(args)
    cfg = build_train_config(args, synthetic)
    trainer, metrics, accuracy = run_training(ds, cfg)
    if args.metrics_out:
        write_metrics_csv(args.metrics_out, metrics)
    counters = trainer.cache.counters()
    emit(
        {
            "iterations": len(metrics),
            "final_loss": metrics[-1].loss,
            "test_accuracy": accuracy,
            "io_saving_pct": 100.0 * io_saving(metrics),
            "cache_hits": counters["hits"],
            "cache_misses": counters["misses"],
            "staleness_violations": counters["staleness_violations"],
        },
        args,
    )
    return 0


# ------------------------------------------------------------------ sweep


def _sweep_cell(payload):
    args, p_grad, t_stale = payload
    ds, synthetic = load_dataset(args)
    cfg = build_train_config(args, synthetic, p_grad=p_grad, t_stale=t_stale)
    _, metrics, accuracy = run_training(ds, cfg)
    return {
        "p_grad": p_grad,
        "t_stale": "inf" if math.isinf(t_stale) else t_stale,
        "io_saving_pct": 100.0 * io_saving(metrics),
        "test_accuracy": accuracy,
        "final_loss": metrics[-1].loss,
    }


def cmd_sweep(args):
    p_grads = [float(v) for v in args.p_grads.split(",")]
    t_stales = [parse_t_stale(v) for v in args.t_stales.split(",")]
    cells = [(args, p, t) for p in p_grads for t in t_stales]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(cell) for cell in cells]
    fields = ["p_grad", "t_stale", "io_saving_pct", "test_accuracy", "final_loss"]
    out = open(args.metrics_out, "w", newline="") if args.metrics_out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# -------------------------------------------------------------------- sgc


def cmd_sgc(args):
    ds, _ = load_dataset(args)
    adj = normalize_adjacency(ds.graph)
    x_hat = propagate(adj.matrix, ds.features, args.k)
    y = np.eye(ds.num_classes)[ds.labels]
    lipschitz = estimate_lipschitz(x_hat)
    eta = args.eta if args.eta is not None else 1.0 / lipschitz
    w0 = args.w0_scale * np.random.default_rng([args.seed, 101]).standard_normal(
        (x_hat.shape[1], ds.num_classes)
    )
    result = run_convergence(
        x_hat,
        y,
        w0,
        eta,
        args.T,
        args.p0,
        args.s,
        seed=args.seed,
        trace_path=args.metrics_out,
    )
    bound = None
    if eta < 2.0 / lipschitz:
        bound = convergence_bound(x_hat, y, w0, eta, args.T, args.p0)
    emit(
        {
            "steps": result.steps,
            "eta": eta,
            "lipschitz": lipschitz,
            "min_grad_norm": result.min_grad_norm,
            "min_grad_sq": result.min_grad_sq,
            "final_loss": float(result.losses[-1]),
            "identity_violation_max": float(result.identity_violations.max()),
            "mean_bound": bound,
            "diverged": result.diverged,
        },
        args,
    )
    return 0


# ------------------------------------------------------------------ comms


def _mode_stats(topo, requests, mode, bytes_per_row):
    stats = simulate_fetch(topo, requests, mode, bytes_per_row)
    return {
        "rounds": stats.num_rounds,
        "transfers": stats.num_transfers,
        "payload_bytes": stats.total_payload_bytes,
        "index_bytes": stats.total_index_bytes,
        "total_bytes": stats.total_bytes,
        "sync_events": stats.sync_events,
        "completion_time": stats.completion_time,
    }


def cmd_comms(args):
    if args.topology:
        topo = parse_topology(args.topology)
    else:
        topo = DeviceTopology.pcie_tree(
            args.switches, args.devices_per_switch, args.bandwidth
        )
    num_devices = len(topo.devices)
    owner = partition_features(args.num_nodes, num_devices)
    rng = np.random.default_rng(args.seed)
    requests = []
    for dev in range(num_devices):
        ids = rng.choice(args.num_nodes, size=args.batch_rows, replace=False)
        requests.extend(requests_for_batch(owner, ids, dev))
    summary = {
        "devices": num_devices,
        "requested_rows": args.batch_rows * num_devices,
        "one_sided": _mode_stats(
            topo, requests, FetchMode.ONE_SIDED, args.bytes_per_row
        ),
        "two_sided": _mode_stats(
            topo, requests, FetchMode.TWO_SIDED, args.bytes_per_row
        ),
    }
    if args.metrics_out:
        rounds = plan_rounds(topo, merge_transfers(requests))
        with open(args.metrics_out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "src", "dst", "num_ids"])
            for rnd, batch in enumerate(rounds):
                for t in batch:
                    writer.writerow([rnd, t.src, t.dst, t.num_ids])
    emit(summary, args)
    return 0


# ------------------------------------------------------------------- main


def build_parser():
    parser = argparse.ArgumentParser(
        prog="histgnn",
        description="mini-batch GNN training with a historical embedding cache",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one configuration")
    add_data_flags(p_train)
    add_train_flags(p_train)
    p_train.add_argument("--metrics-out", help="per-iteration CSV path")
    p_train.add_argument("--summary-out", help="summary JSON path")
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="grid over p_grad x t_stale")
    add_data_flags(p_sweep)
    add_train_flags(p_sweep)
    p_sweep.add_argument("--p-grads", default=SWEEP_P_GRADS, metavar="A,B,...")
    p_sweep.add_argument("--t-stales", default=SWEEP_T_STALES, metavar="A,B,...")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--metrics-out", help="per-cell CSV path (default stdout)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_sgc = sub.add_parser("sgc", help="linear-model staleness convergence run")
    add_data_flags(p_sgc)
    p_sgc.add_argument("--k", type=int, default=2, help="propagation hops")
    p_sgc.add_argument("--s", type=int, default=5, help="max staleness")
    p_sgc.add_argument("--p0", type=float, default=0.5, help="P(fresh row)")
    p_sgc.add_argument("--T", type=int, default=2000, help="step budget")
    p_sgc.add_argument("--eta", type=float, default=None, help="default 1/L")
    p_sgc.add_argument("--w0-scale", type=float, default=0.1)
    p_sgc.add_argument("--metrics-out", help="trace CSV path")
    p_sgc.add_argument("--summary-out", help="summary JSON path")
    p_sgc.set_defaults(func=cmd_sgc)

    p_comms = sub.add_parser("comms", help="simulate multi-device feature fetch")
    p_comms.add_argument("--topology", help="topology description file")
    p_comms.add_argument("--switches", type=int, default=2)
    p_comms.add_argument("--devices-per-switch", type=int, default=2)
    p_comms.add_argument("--bandwidth", type=float, default=1.0)
    p_comms.add_argument("--num-nodes", type=int, default=100_000)
    p_comms.add_argument("--batch-rows", type=int, default=4096)
    p_comms.add_argument("--bytes-per-row", type=int, default=1024)
    p_comms.add_argument("--seed", type=int, default=0)
    p_comms.add_argument("--metrics-out", help="per-round transfer CSV path")
    p_comms.add_argument("--summary-out", help="summary JSON path")
    p_comms.set_defaults(func=cmd_comms)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, NotADirectoryError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
