"""Random edge-addition attack: test Micro-F1 versus the ratio of added edges."""

from _common import METHOD_PARAMS, base_config, bench_graph, out_path, parser

from grugraph.analysis import mean_std_label, robustness_sweep, write_sweep_csv

RATIOS = (0.0, 0.1, 0.2, 0.3, 0.4)


def main():
    p = parser(__doc__)
    p.add_argument("--methods", default="clean,dropedge,dropmessage,flag,grug")
    args = p.parse_args()
    methods = tuple(args.methods.split(","))
    res = robustness_sweep(
        bench_graph(args.graph_seed),
        methods,
        base_config(args.epochs, args.backbone),
        ratios=RATIOS,
        repeats=args.repeats,
        method_params=METHOD_PARAMS,
        jobs=args.jobs,
    )
    write_sweep_csv(res, out_path(args, "robustness.csv"))
    print("ratio  " + "  ".join(f"{m:>12}" for m in methods))
    for r in RATIOS:
        print(f"{r:>5}  " + "  ".join(f"{mean_std_label(res.metrics(r, m)):>12}" for m in methods))
    for m in methods:
        print(f"{m}: mean drop from 0 to 0.4 = {100 * res.degradation(m, 0.0, 0.4):.2f} points")


if __name__ == "__main__":
    main()
