"""Static figures: transfer heatmap and epsilon-sweep curves."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def transfer_heatmap(matrix, path) -> None:
    values = np.asarray(matrix.values)
    n_src, n_tgt = values.shape
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * n_tgt, 1.0 + 0.6 * n_src))
    im = ax.imshow(values, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto", interpolation="nearest")
    fig.colorbar(im, ax=ax, label="target accuracy")
    for i in range(n_src):
        for j in range(n_tgt):
            ax.text(j, i, f"{100 * values[i, j]:.1f}", ha="center", va="center", fontsize=7,
                    color="white" if values[i, j] < 0.5 else "black")
    ax.set_xticks(range(n_tgt), matrix.targets, rotation=60, ha="right", fontsize=7)
    ax.set_yticks(range(n_src), matrix.sources, fontsize=7)
    ax.set_xlabel("target (defense)")
    ax.set_ylabel("source (attack)")
    ax.set_title(f"transfer accuracy, PGD-{matrix.attack.steps} eps={255 * matrix.attack.epsilon:.0f}/255")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)


def sweep_curves(rows, path) -> None:
    """``rows``: [method, structure, eps, eps*255, accuracy, std_error]."""
    series: dict[str, list] = {}
    for method, structure, _, eps255, acc, _se in rows:
        if method == "ours" and structure != "all":
            continue
        series.setdefault(f"{method}:{structure}", []).append((eps255, acc))
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, pts in sorted(series.items()):
        pts.sort()
        style = "-o" if name.startswith("ours") else ("--s" if name.startswith("r2s") else ":^")
        ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], style, label=name, markersize=4)
    ax.set_xlabel("epsilon (x/255)")
    ax.set_ylabel("accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
