"""Run-report serialization: machine-readable JSON, an aligned text table with
a gain-vs-single-prompt row, per-cell accuracy series (CSV), and a rendered
accuracy-vs-shots figure.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .trainer import RunRecord, RunReport


def report_to_json(report: RunReport) -> str:
    aggregates = []
    for d_prompts, n_ctx in report.grid:
        for shots in report.shots_list:
            aggregates.append(
                {
                    "d_prompts": d_prompts,
                    "n_ctx": n_ctx,
                    "shots": shots,
                    "mean_accuracy": report.cell_mean(d_prompts, n_ctx, shots),
                    "delta_vs_single_prompt": report.delta_vs_single_prompt(
                        d_prompts, n_ctx, shots
                    )
                    if (1, report.budget) in report.grid
                    else None,
                }
            )
    payload = {
        "budget": report.budget,
        "seeds": report.seeds,
        "shots": report.shots_list,
        "grid": [list(cell) for cell in report.grid],
        "records": [vars(r) for r in report.records],
        "aggregates": aggregates,
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def report_from_json(text: str) -> RunReport:
    payload = json.loads(text)
    report = RunReport(
        budget=payload["budget"],
        seeds=payload["seeds"],
        shots_list=payload["shots"],
        grid=[tuple(cell) for cell in payload["grid"]],
    )
    report.records = [RunRecord(**r) for r in payload["records"]]
    return report


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def format_table(report: RunReport) -> str:
    """Aligned accuracy table, one row per grid cell, percentages with two
    decimals, plus an absolute-gain row under each ensembled cell."""
    label_width = 22
    col_width = 8
    lines = []
    header = "Method".ljust(label_width) + "".join(
        f"{s}".rjust(col_width) for s in report.shots_list
    )
    lines.append(header)
    lines.append("-" * len(header))
    has_coop = (1, report.budget) in report.grid
    for d_prompts, n_ctx in report.grid:
        is_coop = (d_prompts, n_ctx) == (1, report.budget)
        name = ("CoOp" if is_coop else "ECO") + f" (D={d_prompts}, N={n_ctx})"
        row = name.ljust(label_width)
        for shots in report.shots_list:
            row += _pct(report.cell_mean(d_prompts, n_ctx, shots)).rjust(col_width)
        lines.append(row)
        if has_coop and not is_coop:
            gain = "  gain vs CoOp".ljust(label_width)
            for shots in report.shots_list:
                delta = report.delta_vs_single_prompt(d_prompts, n_ctx, shots)
                gain += f"{100.0 * delta:+.2f}".rjust(col_width)
            lines.append(gain)
    return "\n".join(lines) + "\n"


def series_csv(report: RunReport, d_prompts: int, n_ctx: int) -> str:
    """(shots, mean accuracy) series for one grid cell, for external plotting."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["shots", "mean_accuracy"])
    for shots in report.shots_list:
        writer.writerow([shots, f"{report.cell_mean(d_prompts, n_ctx, shots):.6f}"])
    return buf.getvalue()


def render_figure(report: RunReport, path: str | Path) -> None:
    """Accuracy vs number of shots, one curve per (D, N) configuration."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for d_prompts, n_ctx in report.grid:
        ys = [
            100.0 * report.cell_mean(d_prompts, n_ctx, s) for s in report.shots_list
        ]
        is_coop = (d_prompts, n_ctx) == (1, report.budget)
        label = ("CoOp" if is_coop else "ECO") + f" (D={d_prompts}, N={n_ctx})"
        ax.plot(report.shots_list, ys, marker="o", label=label)
    ax.set_xscale("log", base=2)
    ax.set_xticks(report.shots_list)
    ax.get_xaxis().set_major_formatter(matplotlib.ticker.ScalarFormatter())
    ax.set_xlabel("shots per class")
    ax.set_ylabel("top-1 accuracy (%)")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_report_files(report: RunReport, out_dir: str | Path, stem: str = "report") -> list[Path]:
    """Emit JSON, text table, per-cell CSV series, and the figure; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    json_path = out / f"{stem}.json"
    json_path.write_text(report_to_json(report))
    paths.append(json_path)
    table_path = out / f"{stem}.txt"
    table_path.write_text(format_table(report))
    paths.append(table_path)
    for d_prompts, n_ctx in report.grid:
        p = out / f"{stem}_series_D{d_prompts}xN{n_ctx}.csv"
        p.write_text(series_csv(report, d_prompts, n_ctx))
        paths.append(p)
    fig_path = out / f"{stem}.png"
    render_figure(report, fig_path)
    paths.append(fig_path)
    return paths
