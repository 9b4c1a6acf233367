"""Command-line front end.

Exit codes: 0 success, 2 validation or usage error, 3 ablation compatibility
failure, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from . import harness as H
from . import ir, zoo
from .ablation import ablate, find_transformer_nodes, param_ratio, plan, verify_compat
from .errors import CompatError, TrainingDivergence, TransablateError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_COMPAT = 3
EXIT_DIVERGENCE = 4

MODE_NAMES = {"s": "S", "abl": "Abl"}


def _shape_arg(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_config(path: str | None, seed: int | None, epochs: int | None = None):
    ds, tc = H.load_config(Path(path).read_text() if path else None)
    if seed is not None:
        ds.seed = seed
        tc.seed = seed
    if epochs is not None:
        tc.epochs = epochs
    return ds, tc


def cmd_describe(args) -> int:
    g = zoo.build(args.model, args.scale)
    t = zoo.get_template(args.model)
    print(f"topology: {t.topology}")
    print(ir.describe(g))
    for rw in plan(g):
        print(f"ablation: {rw.target_kind} -> {rw.replacement}: {', '.join(rw.matched_nodes)}")
    return EXIT_OK


def cmd_params(args) -> int:
    g = zoo.build(args.model, args.scale)
    shape = zoo.canonical_input(args.model, args.scale)
    std = ir.count_params(g, shape).total
    out = {"model": args.model, "scale": args.scale, "input_shape": list(shape), "standard": std}
    if find_transformer_nodes(g):
        a = ablate(g, shape)
        out["ablated"] = ir.count_params(a, shape).total
        out["ratio"] = param_ratio(g, a, shape)
    else:
        out["ablated"] = None
        out["ratio"] = None
    if args.json:
        print(json.dumps(out, indent=2))
        return EXIT_OK
    print(f"{args.model} ({args.scale}, input {'x'.join(map(str, shape))})")
    print(f"  standard  {std:>14,}  {std / 1e6:8.2f} M")
    if out["ablated"] is None:
        print("  ablated   no transformer blocks")
    else:
        print(f"  ablated   {out['ablated']:>14,}  {out['ablated'] / 1e6:8.2f} M")
        print(f"  ratio     {out['ratio']:.4f}")
    return EXIT_OK


def cmd_export(args) -> int:
    text = ir.serialize(zoo.build(args.model, args.scale))
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    g = ir.deserialize(Path(args.spec).read_text())
    shape = args.input_shape or g.input_shape
    if shape is None:
        print("error: the spec has no input_shape; pass --input-shape", file=sys.stderr)
        return EXIT_VALIDATION
    a = ablate(g, shape)
    report = verify_compat(g, a, shape)
    print(report.render(), file=sys.stderr)
    if not report.ok:
        return EXIT_COMPAT
    text = ir.serialize(a)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _log(verbose: bool):
    return (lambda msg: print(msg, file=sys.stderr)) if verbose else None


def cmd_train(args) -> int:
    ds, tc = _load_config(args.config, args.seed, args.epochs)
    mode = MODE_NAMES[args.mode]
    shape = (1,) + ds.grid
    std = zoo.build(args.model, "toy", ds.classes)
    if std.dim != len(ds.grid):
        print(f"error: {args.model} is {std.dim}D but the dataset grid is {len(ds.grid)}D", file=sys.stderr)
        return EXIT_VALIDATION
    if mode == "Abl" and not find_transformer_nodes(std):
        print(f"error: {args.model} has no transformer blocks to ablate", file=sys.stderr)
        return EXIT_VALIDATION
    ratio = None
    if find_transformer_nodes(std):
        a = ablate(std, shape)
        compat = verify_compat(std, a, shape)
        if not compat.ok:
            print(compat.render(), file=sys.stderr)
            return EXIT_COMPAT
        ratio = param_ratio(std, a, shape)
    g = std if mode == "S" else a
    data = H.gen_dataset(ds)
    folds = H.kfold_split(len(data), args.folds, ds.seed)
    results = H.train(g, data, folds, tc, _log(args.verbose))
    res = H.ModeResult.from_folds(mode, ir.count_params(g, shape).total, results)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "model": args.model,
        "mode": mode,
        "folds": args.folds,
        "config": json.loads(H.dump_config(ds, tc)),
        "ratio": ratio,
        "result": asdict(res),
    }
    path = run_dir / f"{args.model}.{mode}.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    dm, dsd = res.dsc_stats()
    sm, ssd = res.sdc_stats()
    print(f"{args.model} {mode}: DSC {H.fmt_mean_sd(100 * dm, 100 * dsd)}  SDC {H.fmt_mean_sd(100 * sm, 100 * ssd)}  -> {path}")
    return EXIT_OK


def load_run_dir(run_dir: str | Path) -> H.ExperimentReport:
    """Assemble a report from the ``<model>.<mode>.json`` files written by ``train``."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"run directory {run_dir} does not exist")
    combined = run_dir / "report.json"
    if combined.exists():
        return H.ExperimentReport.from_json(json.loads(combined.read_text()))
    rows: dict[str, H.ModelRow] = {}
    for path in sorted(run_dir.glob("*.json")):
        if path.suffixes[-2:-1] not in ([".S"], [".Abl"]):
            continue
        rec = json.loads(path.read_text())
        row = rows.setdefault(rec["model"], H.ModelRow(rec["model"]))
        res = H.ModeResult(**rec["result"])
        if rec["mode"] == "S":
            row.standard = res
        else:
            row.ablated = res
        if rec.get("ratio") is not None:
            row.ratio = rec["ratio"]
    return H.ExperimentReport(list(rows.values()))


def cmd_report(args) -> int:
    sys.stdout.write(H.emit_report(load_run_dir(args.run_dir), args.format))
    return EXIT_OK


def cmd_experiment(args) -> int:
    ds, tc = _load_config(args.config, args.seed, args.epochs)
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    for m in models:
        zoo.get_template(m)
    modes = [MODE_NAMES[m] for m in args.modes.split(",")]
    report = H.run_experiment(models, modes, ds, tc, args.folds, _log(args.verbose))
    if args.run_dir:
        run_dir = Path(args.run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
        (run_dir / "config.json").write_text(H.dump_config(ds, tc) + "\n")
    sys.stdout.write(H.emit_report(report, args.format))
    return EXIT_COMPAT if any(r.error for r in report.rows) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transablate", description="Transformer ablation for segmentation networks")
    sub = p.add_subparsers(dest="command", required=True)
    models = sorted(zoo.TEMPLATES)

    s = sub.add_parser("describe", help="print topology, shapes and ablation plan of a zoo model")
    s.add_argument("model", choices=models)
    s.add_argument("--scale", choices=zoo.SCALES, default="toy")
    s.set_defaults(func=cmd_describe)

    s = sub.add_parser("params", help="static parameter counts, standard and ablated")
    s.add_argument("model", choices=models)
    s.add_argument("--scale", choices=zoo.SCALES, default="paper")
    s.add_argument("--json", action="store_true", help="machine-readable output")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("export", help="write a zoo model as GraphSpec JSON")
    s.add_argument("model", choices=models)
    s.add_argument("--scale", choices=zoo.SCALES, default="toy")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("ablate", help="ablate a GraphSpec JSON file (compat report on stderr)")
    s.add_argument("spec")
    s.add_argument("-o", "--output")
    s.add_argument("--input-shape", type=_shape_arg, help="C,D,H,W override, e.g. 1,32,32,32")
    s.set_defaults(func=cmd_ablate)

    def training_args(s):
        s.add_argument("--folds", type=int, default=5)
        s.add_argument("--seed", type=int, default=None, help="overrides dataset and training seeds")
        s.add_argument("--epochs", type=int, default=None)
        s.add_argument("--config", help="JSON with optional 'dataset' and 'train' sections")
        s.add_argument("-v", "--verbose", action="store_true", help="per-epoch loss on stderr")

    s = sub.add_parser("train", help="k-fold training of one model in one mode")
    s.add_argument("model", choices=models)
    s.add_argument("--mode", choices=sorted(MODE_NAMES), default="s")
    s.add_argument("--run-dir", default="runs")
    training_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("experiment", help="train several models in both modes and print the report")
    s.add_argument("--models", default="conv_baseline,unetr,swinunetr")
    s.add_argument("--modes", default="s,abl")
    s.add_argument("--run-dir")
    s.add_argument("--format", choices=("text", "csv"), default="text")
    training_args(s)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("report", help="render a report from a run directory")
    s.add_argument("run_dir")
    s.add_argument("--format", choices=("text", "csv"), default="text")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CompatError as exc:
        print(f"compat error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (TransablateError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
