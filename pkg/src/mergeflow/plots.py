"""Static SVG figures for loss curves, PCA scatters and interpolation probes."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "svg.hashsalt": "mergeflow",  # stable element ids -> reproducible bytes
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.5,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def loss_curve(rows, path):
    """rows: (epoch, train_loss, heldout_loss)."""
    rows = np.asarray(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(rows[:, 0], rows[:, 1], label="train")
    ax.plot(rows[:, 0], rows[:, 2], label="held-out", linestyle="--")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("flow-matching loss")
    ax.legend(frameon=False)
    _save(fig, path)


def pca_scatter(rows, path):
    """rows: (x, y, content_id, style_id, space); one panel per space, two colourings."""
    spaces = ["raw", "content_half", "style_half"]
    fig, axes = plt.subplots(2, 3, figsize=(10, 6.5))
    for col, space in enumerate(spaces):
        sel = [r for r in rows if r[4] == space]
        if not sel:
            axes[0, col].set_visible(False)
            axes[1, col].set_visible(False)
            continue
        xy = np.array([(r[0], r[1]) for r in sel])
        for row, (label, idx) in enumerate((("content", 2), ("style", 3))):
            ax = axes[row, col]
            ids = np.array([r[idx] for r in sel])
            ax.scatter(xy[:, 0], xy[:, 1], c=ids, cmap="tab20", s=4, linewidths=0)
            ax.set_title(f"{space} by {label}")
            ax.set_xticks([])
            ax.set_yticks([])
    _save(fig, path)


def interp_curves(curves, path):
    """curves: {pair_label: (lambdas, sim_a, sim_b)}."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for n, (label, (lam, sa, sb)) in enumerate(curves.items()):
        color = f"C{n % 10}"
        ax.plot(lam, sa, color=color, label=f"{label} to start")
        ax.plot(lam, sb, color=color, linestyle="--", label=f"{label} to end")
    ax.set_xlabel("interpolation weight")
    ax.set_ylabel("cosine similarity")
    ax.legend(frameon=False)
    _save(fig, path)
