"""Ablation over perturbation sides: grug_n, grug_e, grug_m, grug_T and grug, plus the GAP row."""

from _common import METHOD_PARAMS, base_config, bench_graph, out_path, parser

from grugraph.analysis import ABLATION_METHODS, ablation_grid, mean_std_label, pooled_std, write_sweep_csv


def main():
    args = parser(__doc__).parse_args()
    res = ablation_grid(
        bench_graph(args.graph_seed), base_config(args.epochs, args.backbone), args.repeats, METHOD_PARAMS, args.jobs
    )
    write_sweep_csv(res, out_path(args, "ablation.csv"))
    for m in ABLATION_METHODS:
        print(f"{m:<8} {mean_std_label(res.method_metrics(m))}")
    spread = pooled_std([res.method_metrics("grug_T"), res.method_metrics("grug")])
    print(f"{'GAP':<8} {100 * res.gap:+.2f} (pooled std {100 * spread:.2f})")


if __name__ == "__main__":
    main()
