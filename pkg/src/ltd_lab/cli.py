"""Command-line surface: plan | budget | lr-curve | train | compare |
sweep-layer | dropout-grid | report.

Each artifact-producing command resolves its config, writes CSV/JSON
outputs plus one manifest into a run directory named by the config
hash, and renders the matching figures next to the data files.
Exit codes: 0 ok, 1 config error, 2 runtime failure (divergence).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, runio, viz
from .budget import (BudgetError, LRAxis, build_ledger, lr_at,
                     saving_fraction)
from .config import ConfigError, LabConfig, load_config
from .corpus import CorpusError
from .model import ModelError
from .schedule import ScheduleError, kept_length_array
from .tensor import TensorError
from .trainer import (TrainError, TrainingDiverged, experiment_compare,
                      experiment_dropout_interplay,
                      experiment_layer_sensitivity, train)

_CONFIG_ERRORS = (ConfigError, ScheduleError, BudgetError, ModelError,
                  TrainError, TensorError, CorpusError)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="TOML config file")
    p.add_argument("--seed", type=int, default=None,
                   help="override [train].seed (and derived seeds)")
    p.add_argument("--iters", type=int, default=None,
                   help="override [train].total_iters")
    p.add_argument("--method", default=None,
                   help="override [train].method")
    p.add_argument("--out-dir", default=None,
                   help="output root (default $LTD_LAB_OUT or ./runs)")


def _load(args) -> LabConfig:
    return load_config(args.config, seed=args.seed, iters=args.iters,
                       method=args.method)


def _run_dir(args, cfg: LabConfig, command: str) -> Path:
    payload = {"command": command, "raw": cfg.raw, "seed": cfg.seed_override,
               "iters": cfg.iters_override, "method": cfg.method_override}
    run_dir = runio.output_root(args.out_dir) / \
        f"{command}-{runio.config_hash(payload)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _finish(run_dir: Path, command: str, cfg, outputs) -> int:
    runio.write_manifest(run_dir, command, cfg.raw, outputs)
    print(f"{command}: wrote {len(outputs)} file(s) to {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# commands


def cmd_plan(args) -> int:
    cfg = _load(args)
    sched = cfg.schedule()
    l, T = cfg.num_layers, cfg.total_iters
    ledger = build_ledger(sched, l, T)
    b = kept_length_array(sched, T)
    run_dir = _run_dir(args, cfg, "plan")
    csv_path = runio.write_csv(
        run_dir / "plan.csv",
        ["t", "b_t", "layertokens_this_iter", "cumulative_layertokens"],
        [(t, int(b[t]), int(ledger.per_iter[t]),
          int(ledger.cumulative[t + 1])) for t in range(T)])
    fig = viz.plot_plan_trajectory(csv_path, run_dir / "plan.png")
    return _finish(run_dir, "plan", cfg, [csv_path, fig])


def cmd_budget(args) -> int:
    cfg = _load(args)
    sched = cfg.schedule()
    l, T = cfg.num_layers, cfg.total_iters
    ledger = build_ledger(sched, l, T)
    saving = saving_fraction(sched, l, T)
    run_dir = _run_dir(args, cfg, "budget")
    csv_path = runio.write_csv(
        run_dir / "budget_per_iter.csv",
        ["t", "layertokens"],
        [(t, int(ledger.per_iter[t])) for t in range(T)])
    payload = {
        "per_iter_csv_path": str(csv_path),
        "total": ledger.total,
        "baseline_total": ledger.baseline_total,
        "middle_layer_saving": saving.middle_layer,
        "whole_model_saving": saving.whole_model,
    }
    json_path = runio.write_json(run_dir / "budget.json", payload)
    print(json.dumps(payload, indent=2, sort_keys=True))
    return _finish(run_dir, "budget", cfg, [csv_path, json_path])


def cmd_lr_curve(args) -> int:
    cfg = _load(args)
    sched = cfg.schedule()
    l, T = cfg.num_layers, cfg.total_iters
    ledger = build_ledger(sched, l, T)
    lr_cfg = cfg.lr()
    run_dir = _run_dir(args, cfg, "lr-curve")
    import dataclasses
    it_cfg = dataclasses.replace(lr_cfg, axis=LRAxis.ITERATION)
    lt_cfg = dataclasses.replace(lr_cfg, axis=LRAxis.LAYERTOKEN)
    csv_path = runio.write_csv(
        run_dir / "lr_curve.csv",
        ["t", "lr_iteration_axis", "lr_layertoken_axis"],
        [(t, lr_at(it_cfg, ledger, t), lr_at(lt_cfg, ledger, t))
         for t in range(T)])
    fig = viz.plot_lr_curves(csv_path, run_dir / "lr_curve.png")
    return _finish(run_dir, "lr-curve", cfg, [csv_path, fig])


def cmd_train(args) -> int:
    cfg = _load(args)
    run_dir = _run_dir(args, cfg, "train")
    records = train(cfg.train(), save_model_to=run_dir / "model")
    csv_path = runio.write_metrics_csv(run_dir / "metrics.csv", records)
    figs = viz.render_run_dir(run_dir)
    last = records[-1]
    print(f"final: iter {last.iteration} eval_loss {last.eval_loss:.4f} "
          f"ppl {last.ppl:.2f}")
    return _finish(run_dir, "train", cfg,
                   [csv_path, run_dir / "model.bin", run_dir / "model.json",
                    *figs])


def cmd_compare(args) -> int:
    cfg = _load(args)
    exp = cfg.experiment()
    run_dir = _run_dir(args, cfg, "compare")
    kwargs = {"seeds": tuple(exp["seeds"])}
    if "methods" in exp:
        kwargs["methods"] = tuple(exp["methods"])
    report = experiment_compare(cfg.train(), out_dir=run_dir, **kwargs)
    figs = viz.render_run_dir(run_dir)
    for method, cell in report["cells"].items():
        print(f"{method:20s} mean final eval loss "
              f"{cell['mean_final_eval_loss']:.4f}")
    outputs = [Path(p) for p in report["outputs"]] + figs
    return _finish(run_dir, "compare", cfg, outputs)


def cmd_sweep_layer(args) -> int:
    cfg = _load(args)
    exp = cfg.experiment()
    run_dir = _run_dir(args, cfg, "sweep-layer")
    report = experiment_layer_sensitivity(
        cfg.train(), keep_fraction=float(exp.get("keep_fraction", 0.5)),
        seeds=tuple(exp["seeds"]), out_dir=run_dir)
    figs = viz.render_run_dir(run_dir)
    for layer, loss in report["per_layer_eval_loss"].items():
        print(f"layer {layer}: eval loss {loss:.4f}")
    outputs = [Path(p) for p in report["outputs"]] + figs
    return _finish(run_dir, "sweep-layer", cfg, outputs)


def cmd_dropout_grid(args) -> int:
    cfg = _load(args)
    exp = cfg.experiment()
    run_dir = _run_dir(args, cfg, "dropout-grid")
    report = experiment_dropout_interplay(
        cfg.train(), dropout_rate=float(exp.get("dropout_rate", 0.1)),
        seeds=tuple(exp["seeds"]), out_dir=run_dir)
    figs = viz.render_run_dir(run_dir)
    for cell, entry in report["cells"].items():
        print(f"{cell:22s} overfit gap {entry['mean_overfit_gap']:.4f}")
    outputs = [Path(p) for p in report["outputs"]] + figs
    return _finish(run_dir, "dropout-grid", cfg, outputs)


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"run directory not found: {run_dir}")
    figs = viz.render_run_dir(run_dir)
    if not figs:
        raise ConfigError(f"no renderable CSVs in {run_dir}")
    manifest = {
        "command": "report",
        "config_hash": runio.config_hash({"run_dir": str(run_dir)}),
        "outputs": sorted(str(p.relative_to(run_dir)) for p in figs),
        "version": __version__,
    }
    runio.write_json(run_dir / "manifest-report.json", manifest)
    print(f"report: rendered {len(figs)} figure(s) in {run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ltd-lab",
        description="random layerwise token dropping laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    specs = [
        ("plan", cmd_plan, "kept-length and LayerToken trajectory CSV"),
        ("budget", cmd_budget, "LayerToken totals and saving fractions"),
        ("lr-curve", cmd_lr_curve, "iteration- vs LayerToken-axis LR CSV"),
        ("train", cmd_train, "single training run with metrics CSV"),
        ("compare", cmd_compare, "method comparison experiment"),
        ("sweep-layer", cmd_sweep_layer, "single-layer drop sensitivity"),
        ("dropout-grid", cmd_dropout_grid, "dropout interplay 2x2 grid"),
    ]
    for name, fn, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("report", help="render figures for an existing run")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    except _CONFIG_ERRORS as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
