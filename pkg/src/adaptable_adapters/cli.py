"""Command line entry point: ``aa-experiment {run,derive,sweep,plot,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backbone import ConfigError
from .data import setting_label
from .experiment import (ExperimentConfig, SchemaError, derive_adapterdrop_counterparts, derive_focused,
                         index_results, layer_sweep, load_results, run_experiment, uni_source_key,
                         write_report)
from .adapters import variant_to_dict
from .plotting import plot_learned_rationals

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

log = logging.getLogger("adaptable_adapters")


def _load_config(args) -> ExperimentConfig:
    raw = json.loads(Path(args.config).read_text()) if Path(args.config).exists() else None
    if raw is None:
        raise ConfigError(f"config file {args.config} not found")
    if getattr(args, "output_dir", None):
        raw["output_dir"] = args.output_dir
    if getattr(args, "workers", None):
        raw["workers"] = args.workers
    if getattr(args, "seeds", None):
        raw["seeds"] = args.seeds
    if getattr(args, "epochs", None):
        raw.setdefault("optimizer", {})["epochs"] = args.epochs
    return ExperimentConfig.from_dict(raw)


def _config_from_output(out: Path) -> ExperimentConfig:
    path = out / "config.json"
    if not path.exists():
        raise ConfigError(f"{out} has no config.json; pass --config")
    return ExperimentConfig.load(path)


def cmd_run(args) -> int:
    cfg = _load_config(args)
    outcome = run_experiment(cfg)
    out = cfg.resolved_output_dir()
    print(f"{len(outcome.results)} runs ({outcome.executed} executed) -> {out}")
    for r in outcome.report.rows:
        print(f"{r.task:16s} {r.variant:22s} {r.setting:6s} n={r.seed_count} "
              f"mean={r.mean:.4f} std={r.std:.4f} layers={r.mean_selected_layers:.2f}")
    if outcome.failed:
        print(f"{len(outcome.failed)} runs failed; see {out / 'aggregate.json'}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_derive(args) -> int:
    out = Path(args.output_dir)
    cfg = ExperimentConfig.load(args.config) if args.config else _config_from_output(out)
    aa_name = args.aa_variant or cfg.aa_variant_name() or "aa"
    aa_runs = index_results(load_results(out), aa_name)
    targets = [(t.name, setting_label(n)) for t in cfg.tasks for n in cfg.data_settings]
    order = [t.name for t in cfg.tasks]
    seed = args.source_seed if args.source_seed is not None else cfg.seeds[0]
    L = cfg.backbone.num_layers
    result = {}
    try:
        if args.mode == "adapterdrop":
            spec = derive_focused("spec", aa_runs, targets, seed, task_order=order)
            uni = derive_focused("uni", aa_runs, targets, seed, task_order=order)
            k = len(next(iter(uni.values())).layers) if uni else None
            drops = derive_adapterdrop_counterparts(spec, L, k)
            for name, table in drops.items():
                result[f"adapterdrop_{name}"] = {f"{t}/{s}": variant_to_dict(v) for (t, s), v in table.items()}
        else:
            table = derive_focused(args.mode, aa_runs, targets, seed, task_order=order)
            result[f"aa_focused_{args.mode}"] = {f"{t}/{s}": variant_to_dict(v) for (t, s), v in table.items()}
            if args.mode != "spec":
                key = uni_source_key(aa_runs, order, seed)
                result["uni_source"] = {"task": key[0], "setting": key[1], "seed": key[2]}
    except KeyError as e:
        print(f"error: {e.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    rows = layer_sweep(cfg, args.k, args.activation)
    for r in rows:
        print(f"{r['task']:16s} {r['setting']:6s} k={r['k']:3d} mean={r['mean']:.4f} std={r['std']:.4f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.output_dir)
    runs = [r for r in load_results(out) if r.status == "ok" and r.rationals]
    if args.variant:
        runs = [r for r in runs if r.variant == args.variant]
    if args.seed is not None:
        runs = [r for r in runs if r.seed == args.seed]
    if args.setting:
        runs = [r for r in runs if r.data_setting == args.setting]
    if args.task:
        runs = [r for r in runs if r.task_id in args.task]
    if not runs:
        print("no runs with rational coefficients match the selection", file=sys.stderr)
        return EXIT_CONFIG
    paths = plot_learned_rationals(runs, Path(args.figure_dir or out / "figures"), args.layers, args.layer,
                                   (args.x_min, args.x_max))
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    report = write_report(Path(args.output_dir))
    print(f"{len(report.rows)} rows, {len(report.incomplete)} incomplete runs")
    return EXIT_PARTIAL if report.incomplete else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aa-experiment", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp):
        sp.add_argument("config", help="experiment JSON config")
        sp.add_argument("--output-dir")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("run", help="execute or resume the run matrix")
    overrides(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("derive", help="print AA-focused / AdapterDrop variants derived from finished AA runs")
    sp.add_argument("--output-dir", required=True)
    sp.add_argument("--config")
    sp.add_argument("--mode", choices=["spec", "uni", "sim", "adapterdrop"], default="spec")
    sp.add_argument("--aa-variant")
    sp.add_argument("--source-seed", type=int)
    sp.set_defaults(func=cmd_derive)

    sp = sub.add_parser("sweep", help="last-k adapter layer sweep")
    overrides(sp)
    sp.add_argument("--k", type=int, nargs="+", required=True)
    sp.add_argument("--activation", choices=["relu", "rational"], default="relu")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("plot", help="SVG plots of learned rational activations")
    sp.add_argument("--output-dir", required=True)
    sp.add_argument("--figure-dir")
    sp.add_argument("--variant")
    sp.add_argument("--task", nargs="+")
    sp.add_argument("--setting")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--layers", type=int, nargs="+")
    sp.add_argument("--layer", type=int, help="also compare this layer across the selected runs")
    sp.add_argument("--x-min", type=float, default=-5.0)
    sp.add_argument("--x-max", type=float, default=5.0)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("report", help="re-aggregate run files into summary.csv, aggregate.json and figures")
    sp.add_argument("--output-dir", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
