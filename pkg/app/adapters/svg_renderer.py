from __future__ import annotations

import colorsys
import csv
import logging
from pathlib import Path

import numpy as np

from app.errors import ExportError, ShapeMismatch, WrongDimension
from app.services.numkernel import as_matrix

logger = logging.getLogger(__name__)

PLOT_SIZE = 480
MARGIN = 24
LEGEND_WIDTH = 140
POINT_RADIUS = 2.5
BASE_PALETTE = [
    "#1f77b4",
    "#ff7f0e",
    "#2ca02c",
    "#d62728",
    "#9467bd",
    "#8c564b",
    "#e377c2",
    "#7f7f7f",
    "#bcbd22",
    "#17becf",
]


def class_color(index: int) -> str:
    if index < len(BASE_PALETTE):
        return BASE_PALETTE[index]
    hue = (index * 0.618033988749895) % 1.0
    red, green, blue = colorsys.hls_to_rgb(hue, 0.5, 0.65)
    return f"#{int(red * 255):02x}{int(green * 255):02x}{int(blue * 255):02x}"


def export_scatter_2d(embeddings, labels, path: str | Path, title: str = "") -> tuple[Path, Path]:
    """Write `<path>` as an SVG scatter with a unit-circle overlay and `<stem>.csv` with `x,y,label` rows."""
    points = as_matrix(embeddings, "embeddings")
    if points.shape[1] != 2:
        raise WrongDimension(f"scatter export needs exactly 2 columns, got {points.shape[1]}")
    label_array = np.asarray(labels).astype(np.int64)
    if label_array.shape != (points.shape[0],):
        raise ShapeMismatch("labels must align with the embedding rows")

    svg_path = Path(path)
    csv_path = svg_path.with_suffix(".csv")
    try:
        svg_path.parent.mkdir(parents=True, exist_ok=True)
        svg_path.write_text(_scatter_svg(points, label_array, title), encoding="utf-8")
        with csv_path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["x", "y", "label"])
            for (x, y), label in zip(points, label_array):
                writer.writerow([repr(float(x)), repr(float(y)), int(label)])
    except OSError as exc:
        raise ExportError(f"could not write scatter export to {svg_path}: {exc}") from exc
    logger.info("Wrote scatter plot %s (%d points)", svg_path, points.shape[0])
    return svg_path, csv_path


def _scatter_svg(points: np.ndarray, labels: np.ndarray, title: str) -> str:
    extent = max(1.0, float(np.max(np.abs(points))) if points.size else 1.0) * 1.05
    scale = (PLOT_SIZE / 2 - MARGIN) / extent
    center = PLOT_SIZE / 2

    def project(x: float, y: float) -> tuple[str, str]:
        return f"{center + x * scale:.3f}", f"{center - y * scale:.3f}"

    classes = sorted({int(label) for label in labels})
    color_of = {class_id: class_color(position) for position, class_id in enumerate(classes)}
    width = PLOT_SIZE + LEGEND_WIDTH
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PLOT_SIZE}" viewBox="0 0 {width} {PLOT_SIZE}">',
        f'<rect x="0" y="0" width="{width}" height="{PLOT_SIZE}" fill="#ffffff"/>',
    ]
    if title:
        parts.append(f'<title>{svg_escape(title)}</title>')
    radius = f"{scale:.3f}"
    parts.append(
        f'<ellipse class="unit-circle" cx="{center:.3f}" cy="{center:.3f}" rx="{radius}" ry="{radius}" '
        'fill="none" stroke="#444444" stroke-dasharray="4 3"/>'
    )
    parts.append('<g class="points">')
    for (x, y), label in zip(points, labels):
        cx, cy = project(float(x), float(y))
        parts.append(f'<circle cx="{cx}" cy="{cy}" r="{POINT_RADIUS}" fill="{color_of[int(label)]}" fill-opacity="0.7"/>')
    parts.append("</g>")
    parts.append('<g class="legend">')
    for row, class_id in enumerate(classes):
        top = MARGIN + row * 18
        parts.append(
            f'<g class="legend-entry"><rect x="{PLOT_SIZE + 12}" y="{top}" width="12" height="12" fill="{color_of[class_id]}"/>'
            f'<text x="{PLOT_SIZE + 30}" y="{top + 10}" font-size="12" font-family="sans-serif">class {class_id}</text></g>'
        )
    parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_heat_grid(
    row_values: list[float],
    column_values: list[float],
    scores: dict[tuple[float, float], float],
    path: str | Path,
    row_name: str = "lambda",
    column_name: str = "m",
) -> Path:
    """Heat grid of Recall@1 with one labelled cell per (row, column) pair."""
    cell = 64
    left, top = 80, 40
    width = left + cell * len(column_values) + MARGIN
    height = top + cell * len(row_values) + MARGIN
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{left}" y="16" font-size="12" font-family="sans-serif">Recall@1 by {svg_escape(row_name)} (rows) and {svg_escape(column_name)} (columns)</text>',
    ]
    for col, column_value in enumerate(column_values):
        parts.append(
            f'<text x="{left + col * cell + cell / 2:.1f}" y="{top - 6}" font-size="11" text-anchor="middle" '
            f'font-family="sans-serif">{svg_escape(column_name)}={column_value:g}</text>'
        )
    for row, row_value in enumerate(row_values):
        y = top + row * cell
        parts.append(
            f'<text x="{left - 6}" y="{y + cell / 2 + 4:.1f}" font-size="11" text-anchor="end" '
            f'font-family="sans-serif">{svg_escape(row_name)}={row_value:g}</text>'
        )
        for col, column_value in enumerate(column_values):
            score = scores.get((row_value, column_value))
            x = left + col * cell
            fill = _heat_color(score)
            label = "n/a" if score is None else f"{score:.3f}"
            parts.append(
                f'<g class="cell"><rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" stroke="#ffffff"/>'
                f'<text x="{x + cell / 2:.1f}" y="{y + cell / 2 + 4:.1f}" font-size="11" text-anchor="middle" '
                f'font-family="sans-serif">{label}</text></g>'
            )
    parts.append("</svg>")

    grid_path = Path(path)
    try:
        grid_path.parent.mkdir(parents=True, exist_ok=True)
        grid_path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ExportError(f"could not write heat grid to {grid_path}: {exc}") from exc
    logger.info("Wrote heat grid %s", grid_path)
    return grid_path


def _heat_color(score: float | None) -> str:
    if score is None:
        return "#dddddd"
    level = min(max(score, 0.0), 1.0)
    red = int(round(255 - 222 * level))
    green = int(round(255 - 153 * level))
    blue = int(round(255 - 75 * level))
    return f"#{red:02x}{green:02x}{blue:02x}"


def svg_escape(value: str) -> str:
    return (
        value.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
        .replace("'", "&#39;")
    )
