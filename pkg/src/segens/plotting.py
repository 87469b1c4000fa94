"""Static SVG summaries of baseline-normalised results."""

from __future__ import annotations

from typing import Dict, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TITLES = {
    "failure": "Failure detection (AURC)",
    "calib": "Calibration (ECE)",
    "ood": "OOD detection (AUROC)",
    "seg": "Segmentation quality",
}


def plot_task(path, task: str, best: Dict[Tuple[str, str, str], Dict[str, float]], baseline: str) -> None:
    """Grouped bars: best relative improvement per configuration and metric.

    Output bytes depend only on the inputs (fixed hash salt, no date).
    """
    keys = sorted(best)
    metrics = sorted({m for v in best.values() for m in v})
    labels = [f"{cfg}\n{ds}/{bb}" for ds, bb, cfg in keys]
    x = np.arange(len(keys))
    width = 0.8 / max(len(metrics), 1)
    with plt.rc_context({"svg.hashsalt": "segens", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(keys) + 2), 3.6))
        for i, m in enumerate(metrics):
            vals = [100.0 * best[k].get(m, np.nan) for k in keys]
            ax.bar(x + (i - (len(metrics) - 1) / 2) * width, vals, width, label=m)
        ax.axhline(0.0, color="black", linewidth=0.8)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylabel(f"improvement over {baseline} (%)")
        ax.set_title(TITLES.get(task, task))
        ax.legend(fontsize=7)
        fig.text(0.01, 0.01, "lower-is-better: (base-x)/base; higher-is-better: (x-base)/base", fontsize=6)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
