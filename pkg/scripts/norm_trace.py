"""Per-epoch train/validation loss and gradient-norm traces for several methods, plus convergence epochs."""

import csv
from dataclasses import replace

import numpy as np
from _common import METHOD_PARAMS, base_config, bench_graph, out_path, parser

from grugraph.analysis import convergence_epochs
from grugraph.training import fit


def main():
    p = parser(__doc__)
    p.add_argument("--methods", default="clean,dropmessage,flag,grug")
    p.add_argument("--threshold", type=float, default=0.5)
    args = p.parse_args()
    g = bench_graph(args.graph_seed)
    base = base_config(args.epochs, args.backbone)
    with open(out_path(args, "norm_trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "repeat", "epoch", "train_loss", "valid_loss", "grad_l1", "grad_l2"])
        for m in args.methods.split(","):
            epochs = []
            for r in range(args.repeats):
                cfg = replace(base, seed=base.seed + r).with_regularizer(method=m, **METHOD_PARAMS.get(m, {}))
                res = fit(g, cfg)
                for row in res.trace:
                    w.writerow([m, r, row.epoch, row.train_loss, row.valid_loss, row.grad_l1, row.grad_l2])
                epochs.append(convergence_epochs(res.trace, args.threshold))
            reached = [e for e in epochs if e is not None]
            mean = f"{np.mean(reached):.1f}" if reached else "not reached"
            print(f"{m:<12} epochs to train loss <= {args.threshold}: {mean} ({len(reached)}/{len(epochs)} runs)")


if __name__ == "__main__":
    main()
