"""Figures written next to the CSV/JSON outputs."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path):
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_roc(rows, path, label=None):
    """``rows``: (threshold, fa, pd). Fa on the x axis in units of 1e-6."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.0))
        fa = [r[1] * 1e6 for r in rows]
        pd = [r[2] for r in rows]
        ax.plot(fa, pd, marker="o", ms=3, lw=1.2, label=label)
        ax.set_xlabel(r"$F_a$ ($\times 10^{-6}$)")
        ax.set_ylabel(r"$P_d$")
        ax.set_ylim(-0.02, 1.02)
        ax.grid(alpha=0.3)
        if label:
            ax.legend(loc="lower right")
        return _save(fig, path)


def plot_training(rows, path):
    """``rows``: dicts with epoch, loss and optionally miou."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        ep = [r["epoch"] for r in rows]
        ax.semilogy(ep, [r["loss"] for r in rows], lw=1.2, color="C0", label="total loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        scored = [(r["epoch"], r["miou"]) for r in rows if r.get("miou") is not None]
        if scored:
            ax2 = ax.twinx()
            ax2.plot(*zip(*scored), lw=1.2, color="C1", label="mIoU")
            ax2.set_ylabel("mIoU")
            ax2.set_ylim(0, 1)
            ax2.spines["right"].set_visible(True)
        ax.grid(alpha=0.3)
        return _save(fig, path)


def plot_breakdown(rows, path):
    """Parameter count per top-level module (``rows`` from complexity.summary)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        names = [r["module"] for r in rows]
        ax.barh(names, [r["params"] / 1e6 for r in rows], color="C0")
        ax.invert_yaxis()
        ax.set_xlabel("parameters (M)")
        return _save(fig, path)
