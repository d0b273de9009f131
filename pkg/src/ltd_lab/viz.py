"""Figure rendering for run directories.

Every experiment's delimited output can be re-rendered to PNG at any
time with `ltd-lab report`; the plotting layer only reads the CSVs, so
figures never contain numbers the data files do not.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_DPI = 130


def read_csv(path) -> dict[str, list[float]]:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return {}
    return {k: [float(r[k]) for r in rows] for k in rows[0]}


def _save(fig, out_path: Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=_DPI, metadata={"Software": "ltd-lab"})
    plt.close(fig)
    return out_path


def plot_training_curves(csv_by_label: dict[str, list[Path]], out_path,
                         x_axis="layertokens", y_axis="eval_loss",
                         title="validation loss") -> Path:
    """Loss curves, one line per (label, run), x in LayerTokens."""
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, (label, paths) in enumerate(sorted(csv_by_label.items())):
        color = colors[i % len(colors)]
        for j, p in enumerate(sorted(paths)):
            data = read_csv(p)
            ax.plot(data[x_axis], data[y_axis], color=color,
                    alpha=0.9 if j == 0 else 0.45,
                    label=label if j == 0 else None)
    ax.set_xlabel("cumulative LayerTokens" if x_axis == "layertokens"
                  else x_axis)
    ax.set_ylabel(y_axis.replace("_", " "))
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def plot_layer_sweep(per_layer_csv, out_path) -> Path:
    """Per-layer sensitivity: eval loss when only that layer drops."""
    data = read_csv(per_layer_csv)
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    ax.plot(data["layer"], data["eval_loss"], marker="o")
    ax.set_xlabel("layer with constant token dropping")
    ax.set_ylabel("final eval loss")
    ax.set_title("single-layer drop sensitivity")
    ax.set_xticks([int(v) for v in data["layer"]])
    fig.tight_layout()
    return _save(fig, out_path)


def plot_lr_curves(lr_csv, out_path) -> Path:
    """Iteration-axis vs LayerToken-axis learning-rate schedules."""
    data = read_csv(lr_csv)
    fig, ax = plt.subplots(figsize=(6.0, 3.8))
    ax.plot(data["t"], data["lr_iteration_axis"], label="iteration axis")
    ax.plot(data["t"], data["lr_layertoken_axis"], label="LayerToken axis",
            linestyle="--")
    ax.set_xlabel("iteration")
    ax.set_ylabel("learning rate")
    ax.set_title("learning-rate schedule comparison")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out_path)


def plot_plan_trajectory(plan_csv, out_path) -> Path:
    """Kept length and cumulative LayerToken consumption over a run."""
    data = read_csv(plan_csv)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.5, 3.6))
    ax1.plot(data["t"], data["b_t"])
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("kept length b_t")
    ax2.plot(data["t"], data["cumulative_layertokens"])
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("cumulative LayerTokens")
    fig.tight_layout()
    return _save(fig, out_path)


def _group_metric_csvs(run_dir: Path) -> dict[str, list[Path]]:
    groups = defaultdict(list)
    for p in sorted(run_dir.glob("*.csv")):
        if p.name in ("per_layer.csv", "plan.csv", "lr_curve.csv",
                      "budget_per_iter.csv"):
            continue
        label = p.stem.rsplit("_seed", 1)[0]
        groups[label].append(p)
    return dict(groups)


def render_run_dir(run_dir) -> list[Path]:
    """Render every figure the directory's CSVs support."""
    run_dir = Path(run_dir)
    out = []
    groups = _group_metric_csvs(run_dir)
    if groups:
        out.append(plot_training_curves(
            groups, run_dir / "curves_vs_layertokens.png"))
        out.append(plot_training_curves(
            groups, run_dir / "curves_vs_iterations.png", x_axis="iter"))
    if (run_dir / "per_layer.csv").exists():
        out.append(plot_layer_sweep(run_dir / "per_layer.csv",
                                    run_dir / "layer_sweep.png"))
    if (run_dir / "lr_curve.csv").exists():
        out.append(plot_lr_curves(run_dir / "lr_curve.csv",
                                  run_dir / "lr_curve.png"))
    if (run_dir / "plan.csv").exists():
        out.append(plot_plan_trajectory(run_dir / "plan.csv",
                                        run_dir / "plan.png"))
    return out
