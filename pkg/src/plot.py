#!/usr/bin/env python3
"""
MSVL Toolkit — ROC Plots (plain SVG text)
"""
from __future__ import annotations

import logging
import os
from html import escape
from typing import List, Sequence, Tuple, Union

from metrics import EvalReport, RocPoint
from utils.errors import ArtifactIOError, RejectedInputError

logger = logging.getLogger(__name__)

WIDTH = 480
HEIGHT = 480
MARGIN = 56
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _xy(fpr: float, tpr: float) -> Tuple[float, float]:
    side = WIDTH - 2 * MARGIN
    return MARGIN + fpr * side, HEIGHT - MARGIN - tpr * side


def _polyline(points: Sequence[RocPoint]) -> str:
    return " ".join("%.2f,%.2f" % _xy(p.fpr, p.tpr) for p in points)


def roc_svg(curves: Sequence[Tuple[str, float, Sequence[RocPoint]]], title: str = "ROC") -> str:
    """One polyline per (name, auroc, points); legend entries read `name (AUROC 0.900)`."""
    if not curves:
        raise RejectedInputError("Nothing to plot: no ROC curves given")
    x0, y0 = _xy(0.0, 0.0)
    x1, y1 = _xy(1.0, 1.0)
    parts: List[str] = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{x0:.2f}" y="{y1:.2f}" width="{x1 - x0:.2f}" height="{y0 - y1:.2f}" '
        'fill="none" stroke="black"/>',
        f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" stroke="#bbbbbb" stroke-dasharray="4 4"/>',
    ]
    for tick in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0):
        tx, _ = _xy(tick, 0.0)
        _, ty = _xy(0.0, tick)
        parts.append(f'<text x="{tx:.2f}" y="{y0 + 16:.2f}" text-anchor="middle">{tick:.1f}</text>')
        parts.append(f'<text x="{x0 - 8:.2f}" y="{ty + 4:.2f}" text-anchor="end">{tick:.1f}</text>')
    parts.append(f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 14}" text-anchor="middle">1 - Specificity</text>')
    parts.append(
        f'<text x="16" y="{HEIGHT / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {HEIGHT / 2:.0f})">Sensitivity</text>'
    )

    for i, (name, area, points) in enumerate(curves):
        color = PALETTE[i % len(PALETTE)]
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{_polyline(points)}"/>'
        )
        ly = y0 - 12 - 16 * (len(curves) - 1 - i)
        parts.append(f'<line x1="{x1 - 190:.2f}" y1="{ly - 4:.2f}" x2="{x1 - 170:.2f}" y2="{ly - 4:.2f}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{x1 - 164:.2f}" y="{ly:.2f}">{escape(name)} (AUROC {area:.3f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_roc_svg(
    path: Union[str, os.PathLike],
    reports: Sequence[EvalReport],
    title: str = "ROC",
) -> None:
    curves = []
    for i, report in enumerate(reports):
        if not report.roc:
            raise RejectedInputError(f"Report {report.model or i} has no ROC points")
        curves.append((report.model or f"model {i + 1}", report.auroc, report.roc))
    svg = roc_svg(curves, title=title)
    try:
        os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(svg)
    except OSError as e:
        raise ArtifactIOError(path, e) from e
    logger.info("Wrote ROC plot with %d curves to %s", len(curves), path)
