"""Sweep the cache policy grid on a synthetic graph and print the I/O and
accuracy trends per cell.

Example:
    python3 scripts/sweep_trends.py --model power_law --n 20000 --epochs 2
"""

import argparse
import math

import numpy as np

from histgnn.data import synth_graph
from histgnn.graphs import build_csr2
from histgnn.trainer import TrainConfig, Trainer, evaluate, io_saving


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default="power_law", choices=("power_law", "sbm"))
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--batch-size", type=int, default=1024)
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--eta", type=float, default=0.05)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--p-grads", default="0,0.5,0.9,1.0")
    ap.add_argument("--t-stales", default="0,10,50,inf")
    ap.add_argument("--out", default=None, help="optional CSV path")
    args = ap.parse_args()

    ds = synth_graph(args.n, args.model, {}, rng=args.seed)
    graph = build_csr2(ds.graph)
    p_grads = [float(v) for v in args.p_grads.split(",")]
    t_stales = [
        math.inf if v.strip() == "inf" else int(v)
        for v in args.t_stales.split(",")
    ]

    rows = []
    print(f"{'p_grad':>7} {'t_stale':>8} {'io_saving%':>11} {'test_acc':>9}")
    for p in p_grads:
        for t in t_stales:
            cfg = TrainConfig(
                fanouts=(5, 5, 5), hidden=args.hidden,
                batch_size=args.batch_size, epochs=args.epochs, eta=args.eta,
                p_grad=p, t_stale=t, seed=args.seed,
            )
            trainer = Trainer(
                graph, ds.features, ds.labels, ds.train_ids, cfg,
                ds.num_classes,
            )
            metrics = trainer.train()
            acc = evaluate(
                trainer.network, graph, ds.features, ds.labels, ds.test_ids
            )
            saving = 100.0 * io_saving(metrics)
            t_txt = "inf" if math.isinf(t) else str(t)
            print(f"{p:>7.2f} {t_txt:>8} {saving:>11.2f} {acc:>9.4f}")
            rows.append((p, t_txt, saving, acc))

    for p in p_grads:
        line = [r[2] for r in rows if r[0] == p]
        trend = "non-decreasing" if all(
            a <= b + 1e-12 for a, b in zip(line, line[1:])
        ) else "NOT monotone"
        print(f"p_grad={p}: saving over t_stale is {trend}")

    if args.out:
        import csv

        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["p_grad", "t_stale", "io_saving_pct", "test_accuracy"])
            w.writerows(rows)
        print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
