"""Figure rendering for run reports (matplotlib, Agg backend).

Figures are rendered next to the delimited/JSON outputs they visualize; the
data files remain the canonical artifact.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .analysis import ShiftReport  # noqa: E402


def render_loss_curves(log_path: str | Path, out_png: str | Path) -> Path:
    """Step-1/Step-2 total loss curves from a metrics JSONL log."""
    ts, s1, s2_t, s2 = [], [], [], []
    with Path(log_path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            ts.append(rec["t"])
            s1.append(rec["step1"]["total"])
            if rec["step2"] is not None:
                s2_t.append(rec["t"])
                s2.append(rec["step2"]["total"])
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2), sharex=True)
    axes[0].plot(ts, s1, lw=0.8, color="tab:blue")
    axes[0].set_title("step 1 total loss")
    axes[1].plot(s2_t, s2, lw=0.8, color="tab:orange")
    axes[1].set_title("step 2 total loss")
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def render_shift_report(report: ShiftReport, out_png: str | Path) -> Path:
    """Inter/intra-domain Hausdorff distances over epochs."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(report.epochs, report.d_inter, "o-", color="tab:red", label="adverse vs normal")
    ax1.set_title("inter-domain distance")
    ax2.plot(report.epochs, report.d_adv, "o-", color="tab:green", label="adverse vs epoch 0")
    ax2.plot(report.epochs, report.d_normal, "o-", color="tab:olive", label="normal vs epoch 0")
    ax2.set_title("intra-domain distance")
    for ax in (ax1, ax2):
        ax.set_xlabel("epoch")
        ax.set_ylabel("Hausdorff (cosine)")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def render_ablation(rows: list[dict], out_png: str | Path, title: str = "ablation") -> Path:
    """Bar chart of seed-averaged adverse-val mIoU per grid cell."""
    labels = [str(r["overrides"]) for r in rows]
    values = [r.get("adverse_miou", float("nan")) for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(rows)), 3.6))
    ax.bar(range(len(rows)), values, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("adverse val mIoU")
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
