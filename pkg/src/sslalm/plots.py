"""Figure rendering for the report paths (training curves, eval metrics)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["save_loss_curve", "save_eval_figure"]


def save_loss_curve(history: list[dict], path):
    """Loss (and grad norm where finite) against optimizer step."""
    steps = [h["step"] for h in history]
    losses = [h["loss"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=1.2, color="tab:blue", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("next-token loss")
    gn = [(h["step"], h["grad_norm"]) for h in history
          if h["grad_norm"] == h["grad_norm"]]
    if gn:
        ax2 = ax.twinx()
        ax2.plot(*zip(*gn), lw=0.8, color="tab:orange", alpha=0.6, label="grad norm")
        ax2.set_ylabel("grad norm")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_figure(report: dict, path):
    """Bar chart of the scalar metrics plus per-class AP when present."""
    metrics = report.get("metrics", {})
    names, values = [], []
    for task, vals in sorted(metrics.items()):
        for k, v in sorted(vals.items()):
            if isinstance(v, (int, float)):
                names.append("%s/%s" % (task, k))
                values.append(float(v))
        for lab, ap in sorted(vals.get("per_class_ap", {}).items()):
            names.append("AP:%s" % lab)
            values.append(float(ap))
    if not names:
        names, values = ["(no scalar metrics)"], [0.0]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names)), 3.5))
    ax.bar(range(len(names)), values, color="tab:blue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
