"""Static SVG figures from a metrics table.

Renders grouped-bar panels (one bar per regime, one group per remaining
condition, one panel per ICC-by-cluster-count block) for a chosen parameter
and metric.  Output is plain text SVG assembled deterministically: the same
metrics file always yields byte-identical figures.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

__all__ = ["load_metrics", "render_metric_figure", "write_report", "REPORT_FIGURES"]

# regime draw order and colors (colorblind-safe palette)
_REGIME_COLORS = {
    "ml": "#4477aa",
    "flat": "#ee6677",
    "anchored_coef": "#228833",
    "weak_var": "#ccbb44",
    "mode_var": "#66ccee",
    "anchored_coef_weak_var": "#aa3377",
    "anchored_coef_mode_var": "#888888",
    "two_stage": "#aa4499",
}
_FALLBACK_COLOR = "#333333"

REPORT_FIGURES = (
    ("fpr_by_condition.svg", "intercept", "fpr", "False-positive rate: intercept"),
    (
        "bias_by_condition.svg",
        "intercept_variance",
        "bias",
        "Raw bias: intercept variance",
    ),
    (
        "width_by_condition.svg",
        "intercept_variance",
        "mean_width",
        "Mean 95% interval width: intercept variance",
    ),
)


def load_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"cell_id", "n_clusters", "icc", "regime", "parameter", "metric", "value"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"{path}: not a metrics table (missing {sorted(required)})")
        return list(reader)


def _fnum(text: str) -> float:
    return float(text)


def _collect(rows: Sequence[dict[str, str]], parameter: str, metric: str):
    """Group values: panels by (icc, J), groups by (M, r2w, r2b), bars by regime."""
    panels: dict[tuple[float, int], dict[tuple, dict[str, float]]] = {}
    regimes: list[str] = []
    for row in rows:
        if row["cell_id"].startswith("marginal"):
            continue
        if row["regime"] == "truth" or row["parameter"] != parameter:
            continue
        if row["metric"] != metric or row["value"] in ("", "nan"):
            continue
        key = (_fnum(row["icc"]), int(row["n_clusters"]))
        group = (
            int(row["cluster_size"]),
            _fnum(row["r2_within"]),
            _fnum(row["r2_between"]),
        )
        panels.setdefault(key, {}).setdefault(group, {})[row["regime"]] = _fnum(row["value"])
        if row["regime"] not in regimes:
            regimes.append(row["regime"])
    return panels, regimes


def _ticks(vmin: float, vmax: float, target: int = 5) -> list[float]:
    span = vmax - vmin
    if span <= 0.0:
        span = abs(vmax) or 1.0
    raw = span / target
    mag = 10.0 ** math.floor(math.log10(raw))
    step = 10.0 * mag
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if span / (mult * mag) <= target:
            step = mult * mag
            break
    first = math.ceil(vmin / step) * step
    ticks = []
    t = first
    while t <= vmax + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_metric_figure(
    rows: Sequence[dict[str, str]], parameter: str, metric: str, title: str
) -> str:
    """One SVG: grouped bars of ``metric`` for ``parameter`` across the grid."""
    panels, regimes = _collect(rows, parameter, metric)
    parts: list[str] = []
    if not panels:
        parts.append(
            '<svg xmlns="http://www.w3.org/2000/svg" width="480" height="120" '
            'viewBox="0 0 480 120">'
        )
        parts.append(f'<title>{_esc(title)}</title>')
        parts.append(
            '<text x="20" y="60" font-family="sans-serif" font-size="14">'
            f"{_esc(title)}: no data for this parameter/metric</text>"
        )
        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    icc_levels = sorted({icc for icc, _ in panels})
    j_levels = sorted({j for _, j in panels})
    all_groups = sorted({g for content in panels.values() for g in content})
    values = [v for content in panels.values() for bars in content.values() for v in bars.values()]
    vmin = min(0.0, min(values))
    vmax = max(0.0, max(values))
    pad = 0.08 * (vmax - vmin or abs(vmax) or 1.0)
    vmin -= pad if vmin < 0 else 0.0
    vmax += pad

    bar_w, bar_gap, group_gap = 9.0, 2.0, 16.0
    group_w = len(regimes) * (bar_w + bar_gap) + group_gap
    plot_w = max(len(all_groups) * group_w, 120.0)
    plot_h = 150.0
    margin_l, margin_t = 64.0, 30.0
    panel_w = margin_l + plot_w + 16.0
    panel_h = margin_t + plot_h + 58.0
    legend_h = 24.0 + 16.0 * ((len(regimes) + 2) // 3)
    width = 20.0 + panel_w * len(j_levels)
    height = 46.0 + legend_h + panel_h * len(icc_levels)

    def y_of(value: float) -> float:
        return plot_h * (vmax - value) / (vmax - vmin)

    parts.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.0f} {height:.0f}">'
    )
    parts.append(f"<title>{_esc(title)}</title>")
    parts.append('<rect width="100%" height="100%" fill="white"/>')
    parts.append(
        f'<text x="20" y="28" font-family="sans-serif" font-size="16" '
        f'font-weight="bold">{_esc(title)}</text>'
    )
    for i, regime in enumerate(regimes):
        color = _REGIME_COLORS.get(regime, _FALLBACK_COLOR)
        lx = 20.0 + 250.0 * (i % 3)
        ly = 40.0 + 16.0 * (i // 3)
        parts.append(f'<rect x="{lx:.2f}" y="{ly:.2f}" width="10" height="10" fill="{color}"/>')
        parts.append(
            f'<text x="{lx + 14:.2f}" y="{ly + 9:.2f}" font-family="sans-serif" '
            f'font-size="11">{_esc(regime)}</text>'
        )
    ticks = _ticks(vmin, vmax)
    for pi, icc in enumerate(icc_levels):
        for pj, j in enumerate(j_levels):
            ox = 20.0 + panel_w * pj + margin_l
            oy = 46.0 + legend_h + panel_h * pi + margin_t
            parts.append(
                f'<text x="{ox:.2f}" y="{oy - 8:.2f}" font-family="sans-serif" '
                f'font-size="12">ICC={icc:g}, J={j}</text>'
            )
            for t in ticks:
                ty = oy + y_of(t)
                parts.append(
                    f'<line x1="{ox:.2f}" y1="{ty:.2f}" x2="{ox + plot_w:.2f}" '
                    f'y2="{ty:.2f}" stroke="#dddddd" stroke-width="1"/>'
                )
                parts.append(
                    f'<text x="{ox - 6:.2f}" y="{ty + 4:.2f}" text-anchor="end" '
                    f'font-family="sans-serif" font-size="10">{t:g}</text>'
                )
            if vmin < 0.0 < vmax:
                zy = oy + y_of(0.0)
                parts.append(
                    f'<line x1="{ox:.2f}" y1="{zy:.2f}" x2="{ox + plot_w:.2f}" '
                    f'y2="{zy:.2f}" stroke="#555555" stroke-width="1"/>'
                )
            parts.append(
                f'<line x1="{ox:.2f}" y1="{oy:.2f}" x2="{ox:.2f}" '
                f'y2="{oy + plot_h:.2f}" stroke="#333333" stroke-width="1"/>'
            )
            parts.append(
                f'<line x1="{ox:.2f}" y1="{oy + plot_h:.2f}" x2="{ox + plot_w:.2f}" '
                f'y2="{oy + plot_h:.2f}" stroke="#333333" stroke-width="1"/>'
            )
            content = panels.get((icc, j), {})
            for gi, group in enumerate(all_groups):
                gx = ox + gi * group_w + group_gap / 2.0
                bars = content.get(group, {})
                for ri, regime in enumerate(regimes):
                    if regime not in bars:
                        continue
                    value = bars[regime]
                    x = gx + ri * (bar_w + bar_gap)
                    top = oy + min(y_of(value), y_of(0.0) if vmin < 0 else y_of(max(vmin, 0.0)))
                    h = abs(y_of(value) - (y_of(0.0) if vmin < 0 else y_of(max(vmin, 0.0))))
                    color = _REGIME_COLORS.get(regime, _FALLBACK_COLOR)
                    parts.append(
                        f'<rect x="{x:.2f}" y="{top:.2f}" width="{bar_w:.2f}" '
                        f'height="{max(h, 0.5):.2f}" fill="{color}"/>'
                    )
                m, r2w, r2b = group
                label = f"M{m} {r2w:g}/{r2b:g}"
                lx = gx + (group_w - group_gap) / 2.0
                ly = oy + plot_h + 10.0
                parts.append(
                    f'<text x="{lx:.2f}" y="{ly:.2f}" font-family="sans-serif" '
                    f'font-size="9" text-anchor="end" '
                    f'transform="rotate(-45 {lx:.2f} {ly:.2f})">{_esc(label)}</text>'
                )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(metrics_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Render the standard three figures next to each other in ``out_dir``."""
    rows = load_metrics(metrics_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for filename, parameter, metric, title in REPORT_FIGURES:
        svg = render_metric_figure(rows, parameter, metric, title)
        target = out / filename
        target.write_text(svg)
        written.append(target)
    return written
