"""Command-line entry point: ``grugraph {train,sweep,attack,ablate,verify,report}``.

Configuration is a flat text file of ``dotted.key = value`` lines (``#`` starts
a comment). Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import logging
import os
import sys
import tempfile
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .analysis import SWEEP_COLUMNS, SweepResult, SweepSpec, ablation_grid, mean_std_label, run_sweep
from .errors import ConfigError, GrugError
from .hetgraph import HeteroGraph, add_random_edges, load_graph, synth_graph
from .oracle import records_json, run_verification
from .regularizers import GradRegConfig
from .training import TRACE_COLUMNS, TrainConfig, fit

log = logging.getLogger("grugraph")

COMMANDS = ("train", "sweep", "attack", "ablate", "verify", "report")
SWEEP_AXES = ("depth", "attack_ratio", "alpha", "beta")
DEFAULT_SWEEP_VALUES = {
    "depth": (1, 2, 3, 4, 5, 6, 7),
    "attack_ratio": (0.0, 0.1, 0.2, 0.3, 0.4),
    "alpha": (0.0, 0.1, 0.2, 0.35, 0.5),
    "beta": (0.0, 0.005, 0.01, 0.05, 0.1),
    "method": ("clean", "grug"),
}

# key -> (type, default). Lists are comma-separated.
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "data.nodes": (str, None),
    "data.edges": (str, None),
    "data.features": (str, None),
    "data.labels": (str, None),
    "synth.p_per_type": (list, (300, 200, 100)),
    "synth.relations": (int, 4),
    "synth.dim": (int, 64),
    "synth.classes": (int, 3),
    "synth.homophily": (float, 0.7),
    "synth.edges_per_relation": (int, 400),
    "synth.class_sep": (float, 0.3),
    "synth.noise": (float, 1.0),
    "synth.seed": (int, 0),
    "train.epochs": (int, 200),
    "train.lr": (float, 0.001),
    "train.task": (str, "node_classification"),
    "train.layers": (int, 1),
    "train.hidden_dim": (int, 32),
    "train.backbone": (str, "rgcn"),
    "train.eval_every": (int, 5),
    "train.embedding_dim": (int, 32),
    "train.select_best": (bool, False),
    "regularizer.method": (str, "clean"),
    "regularizer.drop_rate": (float, 0.0),
    "regularizer.alpha": (float, 0.35),
    "regularizer.beta": (float, 0.01),
    "regularizer.N": (int, 3),
    "regularizer.edge_eps": (float, 0.1),
    "regularizer.norm": (str, "l2"),
    "sweep.axis": (str, "depth"),
    "sweep.values": (list, None),
    "sweep.methods": (list, ("clean", "grug")),
    "sweep.repeats": (int, 5),
    "sweep.loss_threshold": (float, 0.5),
    "attack.ratio": (float, 0.0),
}
# Per-method overrides inside sweeps, e.g. ``method.dropmessage.drop_rate = 0.3``.
OVERRIDE_FIELDS = {"drop_rate": float, "alpha": float, "beta": float, "N": int, "edge_eps": float, "norm": str}


@dataclass
class RunConfig:
    command: str
    values: dict
    overrides: dict = field(default_factory=dict)
    out: Path = Path("out")

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def train_config(self) -> TrainConfig:
        v = self.values
        reg = GradRegConfig(**{k.split(".", 1)[1]: v[k] for k in v if k.startswith("regularizer.")})
        kwargs = {k.split(".", 1)[1]: v[k] for k in v if k.startswith("train.")}
        return TrainConfig(seed=v["seed"], regularizer=reg, **kwargs)

    def sweep_spec(self, axis: str | None = None) -> SweepSpec:
        v = self.values
        axis = axis or v["sweep.axis"]
        values = v["sweep.values"] or DEFAULT_SWEEP_VALUES[axis]
        values = tuple(int(x) if axis == "depth" else float(x) for x in values)
        return SweepSpec(
            axis,
            values,
            v["sweep.repeats"],
            self.train_config(),
            tuple(v["sweep.methods"]),
            self.overrides,
            v["sweep.loss_threshold"],
        )

    def echo(self) -> dict:
        out = {k: (list(x) if isinstance(x, tuple) else x) for k, x in self.values.items()}
        for method, params in sorted(self.overrides.items()):
            for name, x in sorted(params.items()):
                out[f"method.{method}.{name}"] = x
        return out


def _coerce(key: str, kind: type, raw: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is list:
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}") from None


def parse_pairs(pairs: dict[str, str], command: str = "train", base_dir: Path | None = None) -> RunConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    overrides: dict = {}
    for key, raw in pairs.items():
        if key.startswith("method."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in OVERRIDE_FIELDS:
                raise ConfigError(f"unknown config key {key!r}")
            overrides.setdefault(parts[1], {})[parts[2]] = _coerce(key, OVERRIDE_FIELDS[parts[2]], raw)
            continue
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, SCHEMA[key][0], raw)
    if values["synth.p_per_type"] is not None:
        values["synth.p_per_type"] = tuple(
            int(_coerce("synth.p_per_type", int, str(x))) for x in values["synth.p_per_type"]
        )
    for key in ("data.nodes", "data.edges", "data.features", "data.labels"):
        if values[key] is not None:
            path = Path(values[key])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            if not path.is_file():
                raise ConfigError(f"config key {key!r}: file {str(path)!r} does not exist")
            values[key] = str(path)
    given = [values[k] is not None for k in ("data.nodes", "data.edges", "data.features")]
    if any(given) and not all(given):
        raise ConfigError("config keys 'data.nodes', 'data.edges' and 'data.features' must be given together")
    for key in pairs:
        if key in SCHEMA:
            # Check each key against the defaults alone so an error names its key.
            trial = {k: d for k, (_, d) in SCHEMA.items()}
            trial[key] = values[key]
            try:
                _validate(RunConfig(command, trial))
            except ConfigError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from None
    cfg = RunConfig(command, values, overrides)
    try:
        _validate(cfg)
    except ConfigError as exc:
        raise ConfigError(f"config: {exc}") from None
    return cfg


def _validate(cfg: RunConfig) -> None:
    """Build the typed configs once so constraint violations surface at parse time."""
    v = cfg.values
    base = cfg.train_config()
    for method, params in cfg.overrides.items():
        replace(base.regularizer, method=method, **params)
    if v["sweep.axis"] not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {', '.join(SWEEP_AXES)}")
    if v["sweep.repeats"] < 1:
        raise ConfigError("sweep repeats must be >= 1")
    if not 0.0 <= v["attack.ratio"] <= 1.0:
        raise ConfigError("attack ratio must lie in [0, 1]")
    if v["seed"] < 0:
        raise ConfigError("seed must be non-negative")


def _echo_pairs(echo: dict) -> dict[str, str]:
    out = {}
    for key, x in echo.items():
        if x is None:
            continue
        if isinstance(x, list):
            out[key] = ",".join(str(v) for v in x)
        elif isinstance(x, float):
            out[key] = repr(x)
        else:
            out[key] = str(x)
    return out


def parse_config(path, command: str = "train") -> RunConfig:
    """Read a ``key = value`` file, or the config echo of an earlier ``report.json``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    if path.suffix == ".json":
        try:
            echo = json.loads(path.read_text(encoding="utf-8"))["config"]
        except (ValueError, KeyError, TypeError):
            raise ConfigError(f"{path}: not a report.json with a 'config' section") from None
        return parse_pairs(_echo_pairs(echo), command, path.parent)
    pairs: dict[str, str] = {}
    for no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{path}:{no}: duplicate key {key!r}")
        pairs[key] = raw
    return parse_pairs(pairs, command, path.parent)


def build_graph(cfg: RunConfig) -> HeteroGraph:
    v = cfg.values
    if v["data.nodes"] is not None:
        return load_graph(v["data.nodes"], v["data.edges"], v["data.features"], v["data.labels"])
    return synth_graph(
        list(v["synth.p_per_type"]),
        v["synth.relations"],
        v["synth.dim"],
        v["synth.classes"],
        v["synth.homophily"],
        v["synth.seed"],
        edges_per_relation=v["synth.edges_per_relation"],
        class_sep=v["synth.class_sep"],
        noise=v["synth.noise"],
    )


# ---------------------------------------------------------------------------
# output


def fmt_real(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for row in trace:
        w.writerow([fmt_real(getattr(row, c)) for c in TRACE_COLUMNS])
    return buf.getvalue()


def sweep_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for c in result.cells:
        w.writerow([c.axis, fmt_real(c.value), c.method, c.repeat, fmt_real(c.metric), fmt_real(c.epochs_to_threshold)])
    return buf.getvalue()


class OutputDir:
    """Atomic writers that remember what they wrote so a failed run can clean up."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.written: list[Path] = []

    def write(self, name: str, text: str) -> Path:
        self.path.mkdir(parents=True, exist_ok=True)
        target = self.path / name
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.path)
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(target)
        return target

    def rollback(self) -> None:
        for p in self.written:
            if p.exists():
                p.unlink()
        self.written.clear()


def _json_safe(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    return x


def sweep_rows(result: SweepResult) -> list[dict]:
    rows = []
    for r in result.rows:
        vals = result.metrics(r.value, r.method)
        rows.append(
            {
                "value": r.value,
                "method": r.method,
                "mean": r.mean,
                "std": r.std,
                "mean_epochs_to_threshold": r.mean_epochs,
                "label": mean_std_label(vals),
                "macro_f1": [c.macro_f1 for c in result.cells if c.value == r.value and c.method == r.method],
            }
        )
    return rows


# ---------------------------------------------------------------------------
# commands


def _train_like(cfg: RunConfig, out: OutputDir, ratio: float | None = None) -> dict:
    g = build_graph(cfg)
    train_cfg = cfg.train_config()
    graph = g
    if ratio is not None:
        graph = add_random_edges(g, ratio, seed=cfg.seed)
    res = fit(graph, train_cfg)
    out.write("trace.csv", trace_csv(res.trace))
    report = {"metrics": asdict(res.test), "trace": [asdict(r) for r in res.trace]}
    if ratio is not None:
        report["attack_ratio"] = ratio
    return report


def cmd_train(cfg: RunConfig, out: OutputDir, args) -> tuple[dict, int]:
    return _train_like(cfg, out), 0


def cmd_attack(cfg: RunConfig, out: OutputDir, args) -> tuple[dict, int]:
    ratio = args.ratio if args.ratio is not None else cfg.values["attack.ratio"]
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"attack ratio must lie in [0, 1], got {ratio}")
    return _train_like(cfg, out, ratio), 0


def cmd_sweep(cfg: RunConfig, out: OutputDir, args) -> tuple[dict, int]:
    spec = cfg.sweep_spec(args.axis)
    result = run_sweep(spec, build_graph(cfg), jobs=args.jobs)
    out.write("sweep.csv", sweep_csv(result))
    return {"axis": spec.axis, "rows": sweep_rows(result)}, 0


def cmd_ablate(cfg: RunConfig, out: OutputDir, args) -> tuple[dict, int]:
    spec = cfg.sweep_spec()
    result = ablation_grid(build_graph(cfg), spec.base, spec.repeats, cfg.overrides, jobs=args.jobs)
    out.write("sweep.csv", sweep_csv(result))
    rows = sweep_rows(result)
    gap = result.gap
    rows.append({"value": "GAP", "method": "grug_T - grug", "mean": gap, "std": None, "label": f"{100 * gap:+.2f}"})
    return {"axis": "method", "rows": rows}, 0


def cmd_verify(cfg: RunConfig, out: OutputDir, args) -> tuple[dict, int]:
    records = run_verification()
    for r in records:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  observed={r.observed:.6g}  ({r.tolerance})")
    failed = [r for r in records if not r.passed]
    return {"verification": json.loads(records_json(records))}, (1 if failed else 0)


def cmd_report(source: Path) -> int:
    path = Path(source) / "report.json"
    if not path.is_file():
        raise ConfigError(f"no report.json in {str(source)!r}")
    report = json.loads(path.read_text(encoding="utf-8"))
    print(f"command: {report.get('command')}  seed: {report.get('seed')}  version: {report.get('version')}")
    if "metrics" in report:
        for k, v in report["metrics"].items():
            if v is not None:
                print(f"{k}: {v:.6g}")
    for row in report.get("rows", []):
        print(f"{row['value']!s:>12}  {row['method']:<14} {row['label']}")
    for rec in report.get("verification", []):
        print(f"{'PASS' if rec['passed'] else 'FAIL'}  {rec['name']}")
    return 0


HANDLERS = {"train": cmd_train, "sweep": cmd_sweep, "attack": cmd_attack, "ablate": cmd_ablate, "verify": cmd_verify}

EPILOG = f"""outputs:
  report.json  config echo, seed, version, wall-clock and command results
  trace.csv    {",".join(TRACE_COLUMNS)}
  sweep.csv    {",".join(SWEEP_COLUMNS)}
Reals are written with 17 significant digits; empty cells mean "not evaluated" or "not reached".
Set GRUGRAPH_LOG to error, info or debug to control logging."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grugraph",
        description="Gradient-regularized heterogeneous GNN training",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "report":
            p.add_argument(
                "--from", dest="source", required=True, metavar="DIR", help="output directory of an earlier run"
            )
            continue
        p.add_argument("--config", metavar="PATH", help="flat 'key = value' configuration file")
        p.add_argument("--seed", type=int, metavar="U64", help="override the configured seed")
        p.add_argument("--out", default="out", metavar="DIR", help="output directory (default: out)")
        p.add_argument("--jobs", type=int, default=1, metavar="N", help="worker threads for sweep cells")
        if name == "sweep":
            p.add_argument("--axis", choices=SWEEP_AXES, help="axis to sweep (default: sweep.axis)")
        if name == "attack":
            p.add_argument("--ratio", type=float, metavar="R", help="fraction of random edges to add")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("GRUGRAPH_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def _origin(exc: BaseException) -> str:
    """Name of the innermost package module the exception passed through."""
    name = "grugraph"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        mod = frame.f_globals.get("__name__", "")
        if mod.startswith("grugraph."):
            name = mod
    return name


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    if args.command == "report":
        try:
            return cmd_report(args.source)
        except GrugError as exc:
            print(f"error [{_origin(exc)}]: {exc}", file=sys.stderr)
            return 2
    out = OutputDir(args.out)
    try:
        cfg = parse_config(args.config, args.command) if args.config else parse_pairs({}, args.command)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg.values["seed"] = args.seed
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg.out = out.path
        t0 = time.perf_counter()
        body, code = HANDLERS[args.command](cfg, out, args)
        report = {
            "command": args.command,
            "version": __version__,
            "seed": cfg.seed,
            "config": cfg.echo(),
            "wall_clock_seconds": time.perf_counter() - t0,
            **body,
        }
        out.write("report.json", json.dumps(_json_safe(report), indent=2, sort_keys=False) + "\n")
        return code
    except GrugError as exc:
        out.rollback()
        print(f"error [{_origin(exc)}]: {exc}", file=sys.stderr)
        return 2
    except BaseException:
        out.rollback()
        raise


if __name__ == "__main__":
    sys.exit(main())
