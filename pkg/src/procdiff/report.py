"""Comparison tables and dependency-free SVG bar charts from evaluation reports."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from xml.sax.saxutils import escape

from .core import InvalidConfigError
from .evaluation import SCHEMA_VERSION, EvalReport


def load_reports(paths) -> list[tuple[str, EvalReport]]:
    out = []
    for p in paths:
        p = Path(p)
        doc = json.loads(p.read_text())
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise InvalidConfigError(f"{p}: schema version {doc.get('schema_version')} "
                                     f"!= {SCHEMA_VERSION}")
        out.append((p.stem, EvalReport.from_json(p.read_text())))
    return out


def _flat(prefix: str, value, out: dict):
    if isinstance(value, dict):
        for k in sorted(value):
            _flat(f"{prefix}.{k}" if prefix else str(k), value[k], out)
    elif isinstance(value, (int, float, str, bool)) or value is None:
        out[prefix] = value


def comparison_csv(reports: list[tuple[str, EvalReport]]) -> str:
    rows = []
    for name, r in reports:
        row = {"run": name, "task": r.task, "split": r.split, "top1": r.top1,
               "mode": r.provenance.get("mode", "")}
        _flat("", r.extras, row)
        rows.append(row)
    columns = ["run", "task", "split", "top1", "mode"]
    for row in rows:
        columns += [c for c in row if c not in columns]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def bar_chart(labels: list[str], values: list[float], title: str, y_max: float = 1.0) -> str:
    """Vertical bars with value labels; width grows with the bar count."""
    bar, gap, left, top, height = 28, 10, 50, 40, 200
    width = left + len(values) * (bar + gap) + gap
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{top + height + 70}">',
        f'<text x="{left}" y="20" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + height}" x2="{width}" y2="{top + height}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + height}" stroke="black"/>',
        f'<text x="{left - 6}" y="{top + 4}" font-family="sans-serif" font-size="10" '
        f'text-anchor="end">{y_max:g}</text>',
        f'<text x="{left - 6}" y="{top + height}" font-family="sans-serif" font-size="10" '
        f'text-anchor="end">0</text>',
    ]
    for i, (label, v) in enumerate(zip(labels, values)):
        h = height * max(0.0, min(v, y_max)) / y_max
        x = left + gap + i * (bar + gap)
        parts.append(f'<rect class="bar" x="{x}" y="{top + height - h:.2f}" width="{bar}" '
                     f'height="{h:.2f}" fill="#4a78b5"/>')
        parts.append(f'<text x="{x + bar / 2}" y="{top + height - h - 3:.2f}" font-family="sans-serif" '
                     f'font-size="9" text-anchor="middle">{v:.2f}</text>')
        parts.append(f'<text x="{x + bar / 2}" y="{top + height + 14}" font-family="sans-serif" '
                     f'font-size="10" text-anchor="end" transform="rotate(-45 {x + bar / 2} '
                     f'{top + height + 14})">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def per_category_chart(name: str, report: EvalReport) -> str:
    cats = list(report.per_category)
    return bar_chart(cats, [report.per_category[c]["accuracy"] for c in cats],
                     f"{name}: per-category accuracy ({report.task})")


def comparison_chart(reports: list[tuple[str, EvalReport]]) -> str:
    return bar_chart([n for n, _ in reports], [r.top1 for _, r in reports], "top-1 by run")


def render_reports(paths) -> dict[str, str]:
    """Every output file as {filename: content}."""
    reports = load_reports(paths)
    if not reports:
        raise InvalidConfigError("at least one report is required")
    files = {"comparison.csv": comparison_csv(reports), "comparison.svg": comparison_chart(reports)}
    for name, r in reports:
        files[f"{name}.per_category.svg"] = per_category_chart(name, r)
    return files
