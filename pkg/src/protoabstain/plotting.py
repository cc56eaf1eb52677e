"""Figures for sweeps and ablations, rendered to files with the Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (4.8, 3.4),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def accuracy_vs_success(reports, path, title="Balanced accuracy vs success rate"):
    """One point per alpha, connected in alpha order."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        pts = sorted(reports, key=lambda r: r.alpha)
        xs = [100 * r.success_rate for r in pts]
        ys = [100 * r.balanced_accuracy for r in pts]
        ax.plot(xs, ys, marker="o", ms=3, lw=1)
        for r, x, y in zip(pts, xs, ys):
            ax.annotate(f"{r.alpha:g}", (x, y), textcoords="offset points", xytext=(3, 3), fontsize=6)
        ax.set_xlabel("success rate (%)")
        ax.set_ylabel("balanced accuracy (%)")
        ax.set_title(title)
        return _save(fig, path)


def error_vs_alpha(reports, path, title="Abstention error vs alpha"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        pts = sorted(reports, key=lambda r: r.alpha)
        alphas = [r.alpha for r in pts]
        ax.plot([0, 1], [0, 1], ls="--", color="0.5", lw=0.8, label="error = alpha")
        ax.plot(alphas, [r.abstention_error_rate for r in pts], marker="o", ms=3, label="among abstentions")
        ax.plot(alphas, [r.abstention_error_rate_all for r in pts], marker="s", ms=3, label="among all samples")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("alpha")
        ax.set_ylabel("abstention error rate")
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def ablation_bars(rows, path, title="Ablation"):
    """``rows``: ``(label, balanced_accuracy, success_rate)`` triples."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        labels = [r[0] for r in rows]
        x = range(len(rows))
        w = 0.38
        ax.bar([i - w / 2 for i in x], [100 * r[1] for r in rows], w, label="balanced accuracy")
        ax.bar([i + w / 2 for i in x], [100 * r[2] for r in rows], w, label="success rate")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=15, ha="right")
        ax.set_ylabel("%")
        ax.set_ylim(0, 105)
        ax.set_title(title)
        ax.legend(loc="lower right")
        return _save(fig, path)


def training_curve(history, path, title="Training loss"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        pts = [(h["epoch"], h["loss"]) for h in history
               if isinstance(h.get("loss"), float) and h.get("epoch", -1) >= 0 and h["loss"] == h["loss"]]
        if pts:
            ax.plot(*zip(*pts), lw=1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(title)
        return _save(fig, path)
