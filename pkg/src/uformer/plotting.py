"""Figures written next to the CSV reports.  Uses the non-interactive Agg backend."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def figure(width: float = 7.0, height: float | None = None):
    fig, ax = plt.subplots(figsize=(width, height or width * GOLDEN))
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    return fig, ax


def save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cost_report_figure(report, path, title: str = "") -> None:
    """Per-stage parameters and MACs as side-by-side bars."""
    stages = report.stage_totals()
    names = list(stages)
    params = [stages[n][0] / 1e6 for n in names]
    macs = [stages[n][1] / 1e9 for n in names]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(11, 4.2))
    a1.barh(names, params, color="#4c72b0")
    a1.set_xlabel("parameters (M)")
    a1.invert_yaxis()
    a2.barh(names, macs, color="#dd8452")
    a2.set_xlabel("GMACs")
    a2.invert_yaxis()
    a2.set_yticklabels([])
    if title:
        fig.suptitle(title)
    save(fig, path)


def training_figure(rows, path) -> None:
    """Loss (log scale) and validation PSNR against step."""
    steps = [r[0] for r in rows]
    loss = [r[2] for r in rows]
    val = [(r[0], r[3]) for r in rows if r[3] is not None]
    fig, ax = figure()
    ax.semilogy(steps, loss, lw=0.8, color="#4c72b0")
    ax.set_xlabel("step")
    ax.set_ylabel("Charbonnier loss")
    if val:
        ax2 = ax.twinx()
        ax2.plot([v[0] for v in val], [v[1] for v in val], "o-", ms=3, color="#c44e52")
        ax2.set_ylabel("validation PSNR (dB)")
    save(fig, path)


def eval_figure(names, before, after, path, metric: str = "PSNR (dB)") -> None:
    """Per-image metric of the degraded input and the restored output."""
    fig, ax = figure(width=max(5.0, 0.5 * len(names) + 2))
    x = range(len(names))
    finite = [v if math.isfinite(v) else float("nan") for v in before]
    ax.bar([i - 0.2 for i in x], finite, width=0.4, label="input", color="#8c8c8c")
    if after is not None:
        ax.bar([i + 0.2 for i in x], [v if math.isfinite(v) else float("nan") for v in after], width=0.4, label="restored", color="#4c72b0")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.legend(frameon=False)
    save(fig, path)
