"""Learning-curve figures (x: task index, y: mean accuracy over seen tasks)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_learning_curves(curves, path, title: str = "Mean accuracy over seen tasks") -> Path:
    """Draw one line per ``(label, values)`` pair and save a PNG to ``path``.

    PNG metadata is stripped so identical curves give identical bytes.
    """
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for label, values in curves:
        xs = list(range(1, len(values) + 1))
        ax.plot(xs, [100 * v for v in values], marker="o", label=label)
    ax.set_xlabel("task")
    ax.set_ylabel("mean accuracy (%)")
    ax.set_title(title)
    n = max((len(v) for _, v in curves), default=1)
    ax.set_xticks(range(1, n + 1))
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path
