"""Static figures written next to the metrics files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CURVE_KEYS = ("total", "l_s_A", "l_s_B", "l_cps", "l_efs", "l_une", "l_c")


def training_curves(rows: list[dict], path) -> Path:
    """Loss components and learning rate against iteration."""
    path = Path(path)
    its = [r["iter"] for r in rows]
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(7, 6), sharex=True, height_ratios=(3, 1))
    for key in CURVE_KEYS:
        vals = [r[key] for r in rows]
        if any(v != 0 for v in vals):
            ax.plot(its, vals, label=key, lw=1)
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.legend(fontsize=7, ncol=2)
    ax_lr.plot(its, [r["lr"] for r in rows], color="k", lw=1, label="lr")
    ax_lr.plot(its, [r["lambda_c"] for r in rows], color="tab:red", lw=1, label="lambda_c")
    ax_lr.set_yscale("log")
    ax_lr.set_xlabel("iteration")
    ax_lr.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def metric_bars(report, path) -> Path:
    """Per-case Dice and Jaccard bars with the mean as a dashed line."""
    path = Path(path)
    ids = [r.case_id for r in report.per_case]
    x = range(len(ids))
    fig, ax = plt.subplots(figsize=(max(5, 0.5 * len(ids) + 2), 4))
    ax.bar([i - 0.2 for i in x], [r.dice for r in report.per_case], width=0.4, label="Dice (%)")
    ax.bar([i + 0.2 for i in x], [r.jaccard for r in report.per_case], width=0.4, label="Jaccard (%)")
    if report.mean.get("dice") is not None:
        ax.axhline(report.mean["dice"], ls="--", color="k", lw=1)
    ax.set_xticks(list(x), ids, rotation=60, fontsize=7)
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def sweep_bars(rows: list[dict], path, label_key: str = "variant") -> Path:
    """Mean Dice with standard-error whiskers per sweep variant."""
    path = Path(path)
    labels = [str(r[label_key]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 0.8 * len(rows) + 2), 4))
    ax.bar(range(len(rows)), [r["dice"] for r in rows], yerr=[r.get("dice_stderr") or 0 for r in rows], capsize=3)
    ax.set_xticks(range(len(rows)), labels, rotation=30, fontsize=8)
    ax.set_ylabel("Dice (%)")
    lo = min(r["dice"] for r in rows)
    ax.set_ylim(max(0, lo - 10), 100)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
