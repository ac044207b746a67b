"""Report-table and figure emission for completed fits.

Interval presentation follows the "median (lower to upper)" convention.
The scatter figure is written as hand-rolled SVG so artifacts are
byte-stable across runs.
"""

from __future__ import annotations

from typing import Mapping, Sequence

__all__ = [
    "format_interval",
    "table3_rows",
    "table4_row",
    "tableS1_rows",
    "render_figure1_svg",
    "write_csv",
]


def format_interval(median: float, lower: float, upper: float) -> str:
    return f"{median:.2f} ({lower:.2f} to {upper:.2f})"


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _summary_row(section: str, label: str, s: Mapping) -> list:
    return [
        section,
        label,
        repr(s["median"]),
        repr(s["lower95"]),
        repr(s["upper95"]),
        '"' + format_interval(s["median"], s["lower95"], s["upper95"]) + '"',
    ]


def table3_rows(
    summary: Mapping,
    cell_products: Mapping[str, Mapping] | None = None,
) -> list[list]:
    """Heterogeneity-ratio and bias rows for one fit.

    ``cell_products`` adds rows for the cell-level ratio product of each
    multi-flag cell (the product of all active per-term ratios), which is
    how combined-characteristic heterogeneity changes are read.
    """
    rows = []
    for label, s in summary["lambda"].items():
        rows.append(_summary_row("lambda", label, s))
    if cell_products:
        for label, s in cell_products.items():
            rows.append(_summary_row("lambda_cell", label, s))
    for label, s in summary["b0"].items():
        rows.append(_summary_row("b0", label, s))
    for label, s in summary["phi2"].items():
        rows.append(_summary_row("phi2", label, s))
    return rows


def table4_row(label: str, n_metas: int, summary: Mapping) -> list:
    return [
        label,
        n_metas,
        repr(summary["median"]),
        repr(summary["lower95"]),
        repr(summary["upper95"]),
        '"'
        + format_interval(summary["median"], summary["lower95"], summary["upper95"])
        + '"',
    ]


def tableS1_rows(entries: Sequence[tuple[str, Mapping]]) -> list[list]:
    """Model-comparison rows: one (label, dic dict) pair per fit."""
    return [
        [label, repr(d["d_res_bar"]), repr(d["p_d"]), repr(d["dic"])]
        for label, d in entries
    ]


def render_figure1_svg(
    points: Sequence[tuple[str, float, float]],
    title: str = "",
    size: int = 480,
) -> str:
    """Scatter of low-risk vs total heterogeneity medians with y=x diagonal.

    Points under the diagonal are metas whose total heterogeneity exceeds
    the low-risk heterogeneity.  x carries the total, y the low-risk value.
    """
    margin = 56.0
    plot = size - 2 * margin
    values = [v for _, t, tt in points for v in (t, tt)]
    vmax = max(values) if values else 1.0
    vmax = vmax * 1.05 if vmax > 0 else 1.0

    def sx(v: float) -> float:
        return margin + plot * v / vmax

    def sy(v: float) -> float:
        return size - margin - plot * v / vmax

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{margin:.1f}" y1="{size - margin:.1f}" x2="{size - margin:.1f}" '
        f'y2="{size - margin:.1f}" stroke="black" stroke-width="1"/>',
        f'<line x1="{margin:.1f}" y1="{margin:.1f}" x2="{margin:.1f}" '
        f'y2="{size - margin:.1f}" stroke="black" stroke-width="1"/>',
        # identical-estimate reference line
        f'<line x1="{sx(0.0):.2f}" y1="{sy(0.0):.2f}" x2="{sx(vmax):.2f}" '
        f'y2="{sy(vmax):.2f}" stroke="black" stroke-width="1"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = vmax * frac
        parts.append(
            f'<text x="{sx(v):.2f}" y="{size - margin + 18:.1f}" font-size="11" '
            f'text-anchor="middle">{v:.3f}</text>'
        )
        parts.append(
            f'<text x="{margin - 8:.1f}" y="{sy(v) + 4:.2f}" font-size="11" '
            f'text-anchor="end">{v:.3f}</text>'
        )
    parts.append(
        f'<text x="{size / 2:.1f}" y="{size - 12}" font-size="12" '
        f'text-anchor="middle">heterogeneity variance, all trials</text>'
    )
    parts.append(
        f'<text x="14" y="{size / 2:.1f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {size / 2:.1f})">'
        "heterogeneity variance, low-risk trials</text>"
    )
    if title:
        parts.append(
            f'<text x="{size / 2:.1f}" y="22" font-size="13" '
            f'text-anchor="middle">{title}</text>'
        )
    for meta_id, tau2, total in points:
        parts.append(
            f'<circle cx="{sx(total):.2f}" cy="{sy(tau2):.2f}" r="3" '
            f'fill="none" stroke="black" stroke-width="1">'
            f"<title>{meta_id}</title></circle>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
