"""Method comparison table: mean±std test Micro/Macro F1 of every baseline and Grug."""

import csv

import numpy as np
from _common import BASELINES, METHOD_PARAMS, base_config, bench_graph, out_path, parser

from grugraph.analysis import SweepSpec, mean_std_label, run_sweep


def main():
    args = parser(__doc__).parse_args()
    spec = SweepSpec(
        "method", BASELINES, args.repeats, base_config(args.epochs, args.backbone), BASELINES, METHOD_PARAMS
    )
    res = run_sweep(spec, bench_graph(args.graph_seed), args.jobs)
    with open(out_path(args, "table1.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "micro_f1", "macro_f1"])
        print(f"{'method':<12} {'Micro-F1':>12} {'Macro-F1':>12}")
        for m in BASELINES:
            cells = [c for c in res.cells if c.method == m]
            micro = mean_std_label([c.metric for c in cells])
            macro = mean_std_label([c.macro_f1 for c in cells])
            w.writerow([m, micro, macro])
            print(f"{m:<12} {micro:>12} {macro:>12}")
    best = max(BASELINES, key=lambda m: np.mean(res.method_metrics(m)))
    print(f"best mean Micro-F1: {best}")


if __name__ == "__main__":
    main()
