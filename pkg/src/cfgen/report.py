"""Render metric reports: JSON, aligned text table, CSV, and figures.

The evaluate stage writes all four next to each other: ``report.json``,
``report.txt``, ``token_bias.csv``, and PNG figures (token-bias scatter
with the Bonferroni threshold lines, perturbation-type histogram, and a
per-record closeness/diversity scatter).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

from .metrics import MetricsReport, PerturbationType


def report_to_dict(report: MetricsReport, provenance: Optional[dict] = None) -> dict:
    out = {
        "mean_self_bleu": report.mean_self_bleu,
        "mean_levenshtein": report.mean_levenshtein,
        "perturbation_counts": report.perturbation_counts,
        "designated_class": report.designated_class,
        "bias_threshold": report.bias_threshold,
        "token_bias": [
            {
                "token": e.token,
                "count": e.count,
                "class_count": e.class_count,
                "z": e.z,
                "flagged": e.flagged,
            }
            for e in report.token_bias
        ],
        "stage_self_bleu": report.stage_self_bleu,
        "sanity": report.sanity,
        "per_record": report.per_record,
    }
    if provenance is not None:
        out["provenance"] = provenance
    return out


def write_report_json(report: MetricsReport, path: str | Path, provenance: Optional[dict] = None) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report, provenance), fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def render_report_text(report: MetricsReport, top_bias: int = 20) -> str:
    """Aligned plain-text summary table."""
    lines = []
    lines.append("intrinsic metrics")
    lines.append("-" * 44)
    lines.append(f"{'mean self-BLEU':28s} {report.mean_self_bleu:10.4f}")
    lines.append(f"{'mean norm. Levenshtein':28s} {report.mean_levenshtein:10.4f}")
    for stage, val in sorted(report.stage_self_bleu.items()):
        lines.append(f"{'self-BLEU [' + stage + ']':28s} {val:10.4f}")
    lines.append("")
    lines.append("perturbation types")
    lines.append("-" * 44)
    for ptype in PerturbationType:
        lines.append(f"{ptype.value:28s} {report.perturbation_counts.get(ptype.value, 0):10d}")
    if report.token_bias:
        lines.append("")
        lines.append(f"token-label bias (designated class: {report.designated_class}, "
                     f"threshold |z| > {report.bias_threshold:.2f})")
        lines.append("-" * 44)
        lines.append(f"{'token':20s} {'count':>7s} {'z':>9s} {'flagged':>8s}")
        for entry in report.token_bias[:top_bias]:
            lines.append(
                f"{entry.token[:20]:20s} {entry.count:7d} {entry.z:9.2f} {str(entry.flagged):>8s}"
            )
    if report.sanity:
        lines.append("")
        lines.append("sanity")
        lines.append("-" * 44)
        for key, val in report.sanity.items():
            lines.append(f"{key:32s} {val}")
    return "\n".join(lines) + "\n"


def write_report_text(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(render_report_text(report), encoding="utf-8")


def write_token_bias_csv(report: MetricsReport, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token", "count", "class_count", "z", "flagged"])
        for e in report.token_bias:
            writer.writerow([e.token, e.count, e.class_count, f"{e.z:.6f}", int(e.flagged)])


def render_figures(report: MetricsReport, outdir: str | Path) -> list[Path]:
    """Write PNG figures next to the delimited output; returns their paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if report.token_bias:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        counts = [e.count for e in report.token_bias]
        zs = [e.z for e in report.token_bias]
        flagged = [e.flagged for e in report.token_bias]
        ax.scatter(
            [c for c, f in zip(counts, flagged) if not f],
            [z for z, f in zip(zs, flagged) if not f],
            s=14, alpha=0.6, label="within threshold",
        )
        ax.scatter(
            [c for c, f in zip(counts, flagged) if f],
            [z for z, f in zip(zs, flagged) if f],
            s=18, color="tab:red", alpha=0.8, label="flagged",
        )
        if report.bias_threshold is not None:
            ax.axhline(report.bias_threshold, color="tab:blue", linewidth=1, linestyle="--")
            ax.axhline(-report.bias_threshold, color="tab:blue", linewidth=1, linestyle="--")
        for e in report.token_bias[:8]:
            ax.annotate(e.token, (e.count, e.z), fontsize=7, xytext=(3, 3), textcoords="offset points")
        ax.set_xscale("log")
        ax.set_xlabel("token count")
        ax.set_ylabel(f"z (class: {report.designated_class})")
        ax.set_title("token-label bias")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = outdir / "token_bias.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    names = [t.value for t in PerturbationType]
    values = [report.perturbation_counts.get(n, 0) for n in names]
    ax.bar(names, values, color="tab:purple", alpha=0.8)
    ax.set_ylabel("pairs")
    ax.set_title("perturbation types")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    path = outdir / "perturbation_types.png"
    fig.savefig(path, dpi=150)
    plt.close(fig)
    written.append(path)

    if report.per_record:
        fig, ax = plt.subplots(figsize=(5.5, 5))
        ax.scatter(
            [r["levenshtein"] for r in report.per_record],
            [r["self_bleu"] for r in report.per_record],
            s=12, alpha=0.5,
        )
        ax.set_xlabel("normalized Levenshtein (closeness)")
        ax.set_ylabel("self-BLEU (diversity, lower = more diverse)")
        ax.set_xlim(-0.02, 1.02)
        ax.set_ylim(-0.02, 1.02)
        ax.set_title("closeness vs. diversity")
        fig.tight_layout()
        path = outdir / "closeness_diversity.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    return written
