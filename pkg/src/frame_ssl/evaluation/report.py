"""CSV and SVG emission for evaluation results."""

from __future__ import annotations

import csv
from html import escape
from pathlib import Path

import numpy as np


def write_metrics_csv(rows: list[dict], path, aggregate_name: str = "mean") -> list[dict]:
    """One row per video plus an aggregate row holding column means; returns all rows written."""
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    numeric = [k for k in keys if k != "video" and all(isinstance(r.get(k), (int, float)) for r in rows)]
    agg = {"video": aggregate_name}
    for k in numeric:
        vals = [float(r[k]) for r in rows if not np.isnan(float(r[k]))]
        agg[k] = float(np.mean(vals)) if vals else float("nan")
    out = list(rows) + ([agg] if rows else [])
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in out:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})
    return out


def write_bar_svg(values: dict[str, float], path, title: str = "") -> None:
    """Minimal horizontal bar chart for scores in [0, 1]."""
    width, bar_h, pad, label_w = 420, 22, 6, 120
    height = pad * 2 + 24 + len(values) * (bar_h + pad)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{pad}" y="18" font-family="sans-serif" font-size="14">{escape(title)}</text>',
    ]
    y = 24 + pad
    for name, val in values.items():
        v = 0.0 if val is None or np.isnan(val) else float(np.clip(val, 0, 1))
        w = (width - label_w - 60) * v
        parts.append(f'<text x="{pad}" y="{y + 15}" font-family="sans-serif" font-size="12">{escape(name)}</text>')
        parts.append(f'<rect x="{label_w}" y="{y}" width="{w:.1f}" height="{bar_h}" fill="#4a78b5"/>')
        parts.append(
            f'<text x="{label_w + w + 4:.1f}" y="{y + 15}" font-family="sans-serif" font-size="12">{v:.3f}</text>'
        )
        y += bar_h + pad
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
