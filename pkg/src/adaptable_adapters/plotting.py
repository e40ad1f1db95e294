"""Figures for learned rationals, summary tables and layer sweeps.

All figures are written as SVG with a fixed hash salt and no date stamp so
identical inputs give byte-identical files.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .rational import rational_values  # noqa: E402

CURVE_POINTS = 512
X_RANGE = (-5.0, 5.0)

RC = {
    "svg.hashsalt": "adaptable-adapters",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "legend.fontsize": 7,
    "lines.linewidth": 1.4,
}


def new_figure(width: float = 5.0, height: float | None = None):
    golden = (math.sqrt(5) - 1.0) / 2.0
    fig, ax = plt.subplots(figsize=(width, height or width * golden))
    return fig, ax


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _curve(coeffs: dict, xs: np.ndarray) -> np.ndarray:
    return rational_values(xs, coeffs["a"], coeffs["b"])


def _active(run, layer: int) -> bool:
    """A layer's rational is plotted only if the layer is used at inference."""
    if str(layer) not in run.rationals:
        return False
    return layer in run.inference_layers


def plot_layers_of_run(run, path, layers: Sequence[int] | None = None,
                       x_range: tuple[float, float] = X_RANGE, title: str | None = None) -> Path:
    """R(x) for each requested layer of one run."""
    xs = np.linspace(x_range[0], x_range[1], CURVE_POINTS)
    if layers is None:
        layers = sorted({int(k) for k in run.rationals} | set(run.inference_layers))
    with plt.rc_context(RC):
        fig, ax = new_figure()
        skipped = []
        for layer in layers:
            if not _active(run, layer):
                skipped.append(layer)
                continue
            ax.plot(xs, _curve(run.rationals[str(layer)], xs), label=f"layer {layer}")
        if skipped:
            ax.plot([], [], " ", label="no rational: layers " + ", ".join(map(str, skipped)))
        ax.set_xlabel("x")
        ax.set_ylabel("R(x)")
        ax.set_title(title or f"{run.task_id} / {run.variant} / {run.data_setting} / seed {run.seed}")
        ax.legend(loc="best")
        return save(fig, path)


def plot_layer_across_runs(runs: Iterable, layer: int, path,
                           x_range: tuple[float, float] = X_RANGE, label_key: str = "task_id") -> Path:
    """R(x) of one layer index across runs (typically one run per task)."""
    xs = np.linspace(x_range[0], x_range[1], CURVE_POINTS)
    with plt.rc_context(RC):
        fig, ax = new_figure()
        skipped = []
        for run in runs:
            label = str(getattr(run, label_key))
            if not _active(run, layer):
                skipped.append(label)
                continue
            ax.plot(xs, _curve(run.rationals[str(layer)], xs), label=label)
        if skipped:
            ax.plot([], [], " ", label="no rational: " + ", ".join(skipped))
        ax.set_xlabel("x")
        ax.set_ylabel("R(x)")
        ax.set_title(f"layer {layer}")
        ax.legend(loc="best")
        return save(fig, path)


def plot_learned_rationals(runs: Sequence, out_dir, layers: Sequence[int] | None = None,
                           compare_layer: int | None = None,
                           x_range: tuple[float, float] = X_RANGE) -> list[Path]:
    """One SVG per run across layers, plus one per-layer SVG across runs if ``compare_layer`` is set."""
    out_dir = Path(out_dir)
    paths = []
    for run in runs:
        stem = f"rationals_{run.task_id}_{run.variant}_{run.data_setting}_s{run.seed}"
        paths.append(plot_layers_of_run(run, out_dir / f"{_safe(stem)}.svg", layers, x_range))
    if compare_layer is not None and runs:
        paths.append(plot_layer_across_runs(runs, compare_layer, out_dir / f"rationals_layer{compare_layer}.svg",
                                            x_range))
    return paths


def _safe(s: str) -> str:
    return "".join(c if c.isalnum() or c in "_.-" else "-" for c in s)


def plot_summary(report, out_dir) -> list[Path]:
    """Mean test metric with population std per variant, one figure per task."""
    out_dir = Path(out_dir)
    paths = []
    tasks = sorted({r.task for r in report.rows})
    for task in tasks:
        rows = [r for r in report.rows if r.task == task]
        variants = list(dict.fromkeys(r.variant for r in rows))
        settings = sorted({r.setting for r in rows}, key=lambda s: math.inf if s == "full" else int(s[1:]))
        width = 0.8 / max(1, len(settings))
        with plt.rc_context(RC):
            fig, ax = new_figure(max(5.0, 0.7 * len(variants) + 2))
            for j, s in enumerate(settings):
                xs, ms, sd = [], [], []
                for i, v in enumerate(variants):
                    hit = [r for r in rows if r.variant == v and r.setting == s]
                    if hit:
                        xs.append(i + (j - (len(settings) - 1) / 2) * width)
                        ms.append(hit[0].mean)
                        sd.append(hit[0].std)
                ax.bar(xs, ms, width, yerr=sd, label=s, capsize=2)
            ax.set_xticks(range(len(variants)))
            ax.set_xticklabels(variants, rotation=35, ha="right")
            ax.set_ylabel("test metric")
            ax.set_title(task)
            ax.legend(loc="lower right")
            paths.append(save(fig, out_dir / f"summary_{_safe(task)}.svg"))
    return paths


def plot_sweep(rows: list[dict], path) -> Path:
    with plt.rc_context(RC):
        fig, ax = new_figure()
        groups = {}
        for r in rows:
            groups.setdefault((r["task"], r["setting"]), []).append(r)
        for (task, setting), rs in sorted(groups.items()):
            rs = sorted(rs, key=lambda r: r["k"])
            ax.errorbar([r["k"] for r in rs], [r["mean"] for r in rs], yerr=[r["std"] for r in rs],
                        marker="o", capsize=2, label=f"{task} / {setting}")
        ax.set_xlabel("adapter layers (last k)")
        ax.set_ylabel("mean test metric")
        ax.legend(loc="best")
        return save(fig, path)
