"""
analytics.py — QLIP Lab
Human-readable report derived from the evaluate stage's CSV outputs.
No tensors are recomputed here; everything comes from metrics.csv and
bit_histogram.csv.

emit_report(run_dir)      → summary.md / summary.html, fab_by_level.csv, plots
plot_ablation(frame, out) → FAB and MMD² against the swept value
write_ablation_summary(frame, out) → ablation.md, one row per swept value
"""

from __future__ import annotations

import logging
from pathlib import Path

import markdown
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from errors import MissingPrerequisiteError  # noqa: E402

logger = logging.getLogger(__name__)

LEVEL_PREFIX = "fab_level_"
BATCH_PREFIX = "fab_batch_"


# ── Plot data ─────────────────────────────────────────────────────────────────

def fab_by_level_frame(metrics: pd.DataFrame) -> pd.DataFrame:
    """Long table (arm, detail_level, fab) from the fab_level_* columns."""
    level_cols = [c for c in metrics.columns if c.startswith(LEVEL_PREFIX)]
    frame = metrics[["arm"] + level_cols].melt(id_vars=["arm"], value_vars=level_cols, var_name="detail_level", value_name="fab")
    frame["detail_level"] = frame["detail_level"].str[len(LEVEL_PREFIX):].astype(int)
    return frame.dropna(subset=["fab"]).sort_values(["arm", "detail_level"], kind="stable").reset_index(drop=True)


def batch_fab_frame(metrics: pd.DataFrame) -> pd.DataFrame:
    batch_cols = [c for c in metrics.columns if c.startswith(BATCH_PREFIX)]
    frame = metrics[["arm"] + batch_cols].melt(id_vars=["arm"], value_vars=batch_cols, var_name="batch_size", value_name="fab")
    frame["batch_size"] = frame["batch_size"].str[len(BATCH_PREFIX):].astype(int)
    return frame.sort_values(["arm", "batch_size"], kind="stable").reset_index(drop=True)


# ── Markdown ──────────────────────────────────────────────────────────────────

def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return "n/a"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def _table(frame: pd.DataFrame) -> str:
    header = "| " + " | ".join(frame.columns) + " |"
    rule = "|" + "---|" * len(frame.columns)
    body = ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, rule, *body])


def build_summary(metrics: pd.DataFrame, levels: pd.DataFrame, histogram: pd.DataFrame) -> str:
    headline = metrics[["arm", "n_samples", "fab", "bitops", "mmd"]]
    lines = [
        "# QLIP Lab run summary",
        "",
        "## Efficiency and quality per arm",
        "",
        _table(headline),
        "",
    ]
    qlip = metrics[metrics["arm"] == "qlip"]
    if not qlip.empty:
        row = qlip.iloc[0]
        lines += [
            "## Quality predictor",
            "",
            f"- held-out SROCC: {_fmt(row.get('srocc'))}",
            f"- held-out PLCC: {_fmt(row.get('plcc'))}",
            f"- predictor BitOPs per prompt: {_fmt(row.get('t2q_bitops'))}",
            "",
        ]
    lines += [
        "## FAB by prompt detail level",
        "",
        _table(levels.pivot(index="detail_level", columns="arm", values="fab").reset_index()),
        "",
        "## Per-layer bit usage (adaptive arm)",
        "",
        _table(histogram),
        "",
    ]
    return "\n".join(lines)


def build_ablation_summary(frame: pd.DataFrame) -> str:
    """One row per swept value: adaptive-arm FAB, MMD² and FAB per detail level."""
    axis = str(frame["axis"].iloc[0])
    level_cols = sorted(
        (c for c in frame.columns if c.startswith(LEVEL_PREFIX)), key=lambda c: int(c[len(LEVEL_PREFIX):])
    )
    table = frame[["value", "fab", "bitops", "mmd", "mmd_fp", *level_cols]].rename(columns={"value": axis})
    best = frame.loc[frame["mmd"].idxmin()]
    return "\n".join([
        f"# Ablation over {axis}",
        "",
        _table(table),
        "",
        f"- lowest MMD²: {axis}={best['value']} (FAB {_fmt(float(best['fab']))})",
        "",
    ])


def write_ablation_summary(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.write_text(build_ablation_summary(frame))
    return path


# ── Plots ─────────────────────────────────────────────────────────────────────

def _plot_fab_by_level(levels: pd.DataFrame, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for arm, group in levels.groupby("arm", sort=True):
        ax.plot(group["detail_level"], group["fab"], marker="o", label=arm)
    ax.set_xlabel("prompt detail level")
    ax.set_ylabel("FAB (bits)")
    ax.set_xticks(sorted(levels["detail_level"].unique()))
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_histogram(histogram: pd.DataFrame, path: Path) -> None:
    bit_cols = [c for c in histogram.columns if c.startswith("bits_")]
    totals = histogram[bit_cols].sum(axis=1).replace(0, 1)
    shares = histogram[bit_cols].div(totals, axis=0)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bottom = pd.Series(0.0, index=shares.index)
    for col in bit_cols:
        ax.bar(histogram["layer"], shares[col], bottom=bottom, label=col.replace("bits_", "") + "-bit")
        bottom = bottom + shares[col]
    ax.set_xlabel("quantizable layer")
    ax.set_ylabel("share of (step, sample)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    fig, (ax_fab, ax_mmd) = plt.subplots(1, 2, figsize=(8, 3.5))
    labels = frame["value"].astype(str).tolist()
    ax_fab.plot(labels, frame["fab"], marker="o")
    ax_fab.set_ylabel("FAB (bits)")
    ax_mmd.plot(labels, frame["mmd"], marker="o", label="adaptive")
    ax_mmd.plot(labels, frame["mmd_fp"], linestyle="--", label="full precision")
    ax_mmd.set_ylabel("MMD²")
    ax_mmd.legend(fontsize=8)
    for ax in (ax_fab, ax_mmd):
        ax.set_xlabel(str(frame["axis"].iloc[0]))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ── Entry point ───────────────────────────────────────────────────────────────

def emit_report(run_dir) -> dict:
    """
    Reads metrics.csv and bit_histogram.csv from an evaluate directory and
    writes the summary (markdown + HTML), fab_by_level.csv, batch_fab.csv and
    two PNG plots next to them. Returns {artifact name: path}.
    """
    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.csv"
    histogram_path = run_dir / "bit_histogram.csv"
    for path in (metrics_path, histogram_path):
        if not path.is_file():
            raise MissingPrerequisiteError("report", "evaluate")

    metrics = pd.read_csv(metrics_path)
    histogram = pd.read_csv(histogram_path)
    levels = fab_by_level_frame(metrics)
    batches = batch_fab_frame(metrics)

    out = {
        "fab_by_level.csv": run_dir / "fab_by_level.csv",
        "batch_fab.csv":    run_dir / "batch_fab.csv",
        "summary.md":       run_dir / "summary.md",
        "summary.html":     run_dir / "summary.html",
        "fab_by_level.png": run_dir / "fab_by_level.png",
        "bit_histogram.png": run_dir / "bit_histogram.png",
    }
    levels.to_csv(out["fab_by_level.csv"], index=False, float_format="%.10g")
    batches.to_csv(out["batch_fab.csv"], index=False, float_format="%.10g")

    text = build_summary(metrics, levels, histogram)
    out["summary.md"].write_text(text)
    out["summary.html"].write_text(markdown.markdown(text, extensions=["tables"]))

    _plot_fab_by_level(levels, out["fab_by_level.png"])
    _plot_histogram(histogram, out["bit_histogram.png"])
    logger.info(f"[report] wrote {len(out)} files to {run_dir}")
    return out
