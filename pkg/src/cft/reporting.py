"""Figure rendering for sweep and cost outputs. Everything draws to files
through the Agg backend; nothing here ever opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

from .cost import CostReport  # noqa: E402
from .sweep import SweepRow  # noqa: E402


def render_sweep_figures(rows: list[SweepRow], out_dir: str | Path,
                         prefix: str = "sweep") -> list[Path]:
    """Write the threshold-tradeoff figures; returns the created paths.

    One figure plots expected cost against the exit threshold, the other the
    coarse/fine split (plus correct-per-stage counts when labels were given).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    etas = [r.eta for r in rows]

    flops_path = out_dir / f"{prefix}-flops.png"
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(etas, [r.expected_flops / 1e9 for r in rows], marker="o")
    ax.set_xlabel("exit threshold")
    ax.set_ylabel("expected cost (G mul-adds / image)")
    ax.set_title("Cost vs. exit threshold")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(flops_path, dpi=120)
    plt.close(fig)

    stages_path = out_dir / f"{prefix}-stages.png"
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(etas, [r.exit_count for r in rows], marker="o", label="exit at coarse")
    ax.plot(etas, [r.fine_count for r in rows], marker="s", label="refined")
    if rows and rows[0].correct_coarse is not None:
        ax.plot(etas, [r.correct_coarse for r in rows], marker="^",
                linestyle="--", label="correct at coarse")
        ax.plot(etas, [r.correct_fine for r in rows], marker="v",
                linestyle="--", label="correct at fine")
    ax.set_xlabel("exit threshold")
    ax.set_ylabel("images")
    ax.set_title("Stage usage vs. exit threshold")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(stages_path, dpi=120)
    plt.close(fig)

    return [flops_path, stages_path]


def render_cost_figure(report: CostReport, path: str | Path) -> Path:
    """Bar chart of where one run's multiply-accumulates went."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [
        ("coarse encoders", report.coarse_flops),
        ("fine encoders", report.fine_flops),
        ("feature reuse", report.reuse_flops),
        ("embed + head", report.embed_head_flops),
    ]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar([p[0] for p in parts], [p[1] / 1e6 for p in parts], color="#4878a8")
    ax.set_ylabel("M mul-adds")
    ax.set_title(f"Cost breakdown (total {report.total / 1e9:.3f}G)")
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
