"""Figures for a comparison run, written next to its report.json."""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "legend.fontsize": 9,
    "legend.frameon": False,
}

# one colour per arm, kept fixed so every figure reads the same way
COLORS = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"]


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def learning_curves(histories: dict[str, list[dict]], path) -> Path:
    """Per-epoch training MSE (as RMSE) and validation RMSE for every arm."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for color, (name, hist) in zip(COLORS, sorted(histories.items())):
            epochs = [h["epoch"] for h in hist]
            ax.plot(epochs, np.sqrt([h["train_mse"] for h in hist]), color=color, ls="--",
                    label=f"{name} train")
            ax.plot(epochs, [h["val_rmse"] for h in hist], color=color, label=f"{name} val")
        ax.set_xlabel("epoch")
        ax.set_ylabel("RMSE")
        ax.legend()
        return _save(fig, path)


def rmse_bars(results: dict[str, dict], percent_decrease: float, path) -> Path:
    """Train and validation RMSE side by side for the two arms."""
    names = list(results)
    x = np.arange(len(names))
    width = 0.38
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(x - width / 2, [results[n]["rmse_train"] for n in names], width, label="train", color=COLORS[0])
        ax.bar(x + width / 2, [results[n]["rmse_val"] for n in names], width, label="validation", color=COLORS[1])
        ax.set_xticks(x, names)
        ax.set_ylabel("RMSE")
        ax.set_title(f"validation RMSE decrease: {percent_decrease:.1f}%")
        ax.legend()
        return _save(fig, path)


def prediction_scatter(predictions: dict[str, np.ndarray], targets: np.ndarray, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 4.8))
        for color, (name, pred) in zip(COLORS, sorted(predictions.items())):
            ax.scatter(targets, pred, s=8, alpha=0.6, color=color, label=name)
        lo = float(min(np.min(targets), *(np.min(p) for p in predictions.values())))
        hi = float(max(np.max(targets), *(np.max(p) for p in predictions.values())))
        ax.plot([lo, hi], [lo, hi], color="0.4", lw=1)
        ax.set_xlabel("steering angle (label)")
        ax.set_ylabel("prediction")
        ax.legend()
        return _save(fig, path)


def write_figures(report, out_dir) -> list[Path]:
    """Render every figure for a ComparisonReport into ``out_dir``."""
    out_dir = Path(out_dir)
    paths = [learning_curves(report.histories, out_dir / "learning_curves.png"),
             rmse_bars(report.results, report.percent_decrease_val, out_dir / "rmse.png")]
    if report.val_predictions and report.val_targets is not None:
        paths.append(prediction_scatter(report.val_predictions, report.val_targets,
                                        out_dir / "val_predictions.png"))
    return paths
