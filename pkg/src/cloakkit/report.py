"""Result tables and plots.

``metrics.csv`` is the primary machine-readable artifact.  Fixed column
order: identity, seed, defense, attack, split, prompt, ism_proxy,
fdfr_proxy, quality_proxy, n_generated, threshold.  One row per evaluated
(arm, split, prompt) combination; prompt "all" rows aggregate every
generation of that split.

``emit_report`` derives from it a per-defense summary table, a three-row
ablation table (subspace cloak vs. single-point cloak vs. gradient-average
baseline), and one grouped-bar SVG per proxy metric.  SVGs are written
directly; no plotting dependency.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import DataError
from .experiment import ArmRecord, SplitOutcome
from .metrics import MetricsReport

CSV_COLUMNS = (
    "identity",
    "seed",
    "defense",
    "attack",
    "split",
    "prompt",
    "ism_proxy",
    "fdfr_proxy",
    "quality_proxy",
    "n_generated",
    "threshold",
)

ABLATION_DEFENSES = ("id_cloak", "id_cloak_point", "gradient_avg_universal")


def _report_row(report: MetricsReport) -> dict[str, str]:
    meta = report.meta
    return {
        "identity": meta.get("identity", ""),
        "seed": meta.get("seed", ""),
        "defense": meta.get("defense", ""),
        "attack": meta.get("attack", ""),
        "split": meta.get("split", ""),
        "prompt": meta.get("prompt", ""),
        "ism_proxy": repr(report.ism_proxy),
        "fdfr_proxy": repr(report.fdfr_proxy),
        "quality_proxy": repr(report.quality_proxy),
        "n_generated": str(report.n_generated),
        "threshold": repr(report.threshold),
    }


def records_to_rows(records: list[ArmRecord]) -> list[dict[str, str]]:
    rows: list[dict[str, str]] = []
    for record in records:
        outcomes: list[SplitOutcome] = [
            o for o in (record.result.train, record.result.test) if o is not None
        ]
        for outcome in outcomes:
            rows.append(_report_row(outcome.report))
            rows.extend(_report_row(r) for r in outcome.per_prompt)
    return rows


def write_metrics_csv(records: list[ArmRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(records_to_rows(records))
    return path


def read_metrics_csv(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no metrics file to report from")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
            raise DataError(f"{path}: unexpected CSV header {reader.fieldnames}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: metrics file has no rows")
    return rows


def _mean(values: list[float]) -> float:
    return sum(values) / len(values)


def summarize_rows(
    rows: list[dict[str, str]], split: str = "test", prompt: str = "all"
) -> list[dict[str, str]]:
    """Mean metrics per defense over the selected split and prompt label."""

    grouped: dict[str, list[dict[str, str]]] = {}
    for row in rows:
        if row["split"] == split and row["prompt"] == prompt:
            grouped.setdefault(row["defense"], []).append(row)
    out = []
    for defense in sorted(grouped):
        members = grouped[defense]
        out.append(
            {
                "defense": defense,
                "split": split,
                "arms": str(len(members)),
                "ism_proxy_mean": repr(_mean([float(r["ism_proxy"]) for r in members])),
                "fdfr_proxy_mean": repr(_mean([float(r["fdfr_proxy"]) for r in members])),
                "quality_proxy_mean": repr(_mean([float(r["quality_proxy"]) for r in members])),
            }
        )
    return out


def ablation_rows(rows: list[dict[str, str]], split: str = "test") -> list[dict[str, str]]:
    """Three-row variant comparison: subspace vs. point vs. gradient average."""

    summary = {r["defense"]: r for r in summarize_rows(rows, split=split)}
    out = []
    for defense in ABLATION_DEFENSES:
        if defense in summary:
            out.append(summary[defense])
    return out


def _write_table(path: Path, rows: list[dict[str, str]]) -> Path:
    if not rows:
        raise DataError(f"{path}: no rows to tabulate")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return path


def grouped_bar_svg(
    title: str,
    groups: list[str],
    series: list[str],
    values: dict[tuple[str, str], float],
    width: int = 640,
    height: int = 360,
) -> str:
    """Minimal grouped bar chart; values keyed by (group, series)."""

    margin_left, margin_bottom, margin_top = 60, 70, 40
    plot_w = width - margin_left - 20
    plot_h = height - margin_top - margin_bottom
    vmax = max(list(values.values()) + [1e-12])
    palette = ("#4878a8", "#e49444", "#6aa56e", "#d1605e", "#8b7bb5")
    group_w = plot_w / max(len(groups), 1)
    bar_w = group_w * 0.8 / max(len(series), 1)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{margin_left}" y1="{margin_top + plot_h}" x2="{margin_left + plot_w}" '
        f'y2="{margin_top + plot_h}" stroke="#333"/>',
        f'<line x1="{margin_left}" y1="{margin_top}" x2="{margin_left}" '
        f'y2="{margin_top + plot_h}" stroke="#333"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = margin_top + plot_h * (1.0 - frac)
        parts.append(
            f'<text x="{margin_left - 6}" y="{y + 4:.1f}" text-anchor="end">'
            f"{vmax * frac:.3g}</text>"
        )
        parts.append(
            f'<line x1="{margin_left - 3}" y1="{y:.1f}" x2="{margin_left}" y2="{y:.1f}" stroke="#333"/>'
        )
    for gi, group in enumerate(groups):
        x0 = margin_left + gi * group_w + group_w * 0.1
        for si, s in enumerate(series):
            v = values.get((group, s), 0.0)
            h = plot_h * (v / vmax)
            x = x0 + si * bar_w
            y = margin_top + plot_h - h
            parts.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{bar_w * 0.92:.1f}" height="{h:.1f}" '
                f'fill="{palette[si % len(palette)]}"/>'
            )
        label_x = margin_left + gi * group_w + group_w / 2
        parts.append(
            f'<text x="{label_x:.1f}" y="{margin_top + plot_h + 14}" text-anchor="middle" '
            f'transform="rotate(18 {label_x:.1f} {margin_top + plot_h + 14})">{group}</text>'
        )
    for si, s in enumerate(series):
        x = margin_left + si * 110
        y = height - 14
        parts.append(
            f'<rect x="{x}" y="{y - 9}" width="10" height="10" fill="{palette[si % len(palette)]}"/>'
        )
        parts.append(f'<text x="{x + 14}" y="{y}">{s}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def metric_svg(rows: list[dict[str, str]], metric: str, split: str = "test") -> str:
    """Per-prompt grouped bars of one metric, averaged over arms."""

    prompts = sorted({r["prompt"] for r in rows if r["prompt"] != "all"})
    defenses = sorted({r["defense"] for r in rows})
    values: dict[tuple[str, str], float] = {}
    for defense in defenses:
        for prompt in prompts:
            members = [
                float(r[metric])
                for r in rows
                if r["defense"] == defense and r["prompt"] == prompt and r["split"] == split
            ]
            if members:
                values[(defense, prompt)] = _mean(members)
    return grouped_bar_svg(f"{metric} ({split} split)", defenses, prompts, values)


def emit_report(exp_dir: str | Path) -> list[Path]:
    """Regenerate summary tables and plots from an experiment directory."""

    exp_dir = Path(exp_dir)
    reports = exp_dir / "reports"
    rows = read_metrics_csv(reports / "metrics.csv")
    written = []
    written.append(_write_table(reports / "summary.csv", summarize_rows(rows)))
    ablation = ablation_rows(rows)
    if ablation:
        written.append(_write_table(reports / "ablation.csv", ablation))
    for metric in ("ism_proxy", "fdfr_proxy", "quality_proxy"):
        path = reports / f"{metric}.svg"
        path.write_text(metric_svg(rows, metric), encoding="utf-8")
        written.append(path)
    return written
