"""Depth sweep (1 to 7 layers): test Micro-F1 per depth for clean, drop baselines and Grug."""

from _common import METHOD_PARAMS, base_config, bench_graph, out_path, parser

from grugraph.analysis import mean_std_label, oversmoothing_sweep, write_sweep_csv


def main():
    p = parser(__doc__)
    p.add_argument("--methods", default="clean,dropmessage,flag,grug")
    p.add_argument("--max-depth", type=int, default=7)
    args = p.parse_args()
    methods = tuple(args.methods.split(","))
    res = oversmoothing_sweep(
        bench_graph(args.graph_seed),
        methods,
        base_config(args.epochs, args.backbone),
        depths=range(1, args.max_depth + 1),
        repeats=args.repeats,
        method_params=METHOD_PARAMS,
        jobs=args.jobs,
    )
    write_sweep_csv(res, out_path(args, "oversmoothing.csv"))
    print("depth  " + "  ".join(f"{m:>12}" for m in methods))
    for d in range(1, args.max_depth + 1):
        print(f"{d:>5}  " + "  ".join(f"{mean_std_label(res.metrics(d, m)):>12}" for m in methods))
    for m in methods:
        print(
            f"{m}: mean drop from depth 1 to {args.max_depth} = "
            f"{100 * res.degradation(m, 1, args.max_depth):.2f} points"
        )


if __name__ == "__main__":
    main()
