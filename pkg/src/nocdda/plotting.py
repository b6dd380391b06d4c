"""Dependency-free SVG rendering of 2-D reverse-sampling trajectories."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .sampler import Trajectory, load_trajectories_csv

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf"]


class PlotDimensionError(ValueError):
    pass


def trajectories_svg(trajectories: list[Trajectory], dims: tuple[int, int] | None = None,
                     width: int = 480, height: int = 480, margin: int = 40) -> str:
    """One polyline per trajectory coloured by class, with start (circle) and end (square) markers."""
    if trajectories:
        d = trajectories[0].states[0][1].shape[0]
        if dims is None:
            if d > 2:
                raise PlotDimensionError(f"trajectories are {d}-dimensional; pick two coordinates with --dims i j")
            dims = (0, 1) if d == 2 else (0, 0)
        if max(dims) >= d:
            raise PlotDimensionError(f"coordinate {max(dims)} out of range for {d}-dimensional data")
    paths = [np.array([s[[dims[0], dims[1]]] for _, s in tr.states]) for tr in trajectories]
    pts = np.vstack(paths) if paths else np.array([[-1.0, -1.0], [1.0, 1.0]])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)

    def px(p):
        x = margin + (p[0] - lo[0]) / span[0] * (width - 2 * margin)
        y = height - margin - (p[1] - lo[1]) / span[1] * (height - 2 * margin)
        return f"{x:.2f},{y:.2f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<line class="axis" x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
           f'y2="{height - margin}" stroke="black"/>',
           f'<line class="axis" x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
           f'<text x="{width / 2:.0f}" y="{height - 8}" font-size="12" text-anchor="middle">'
           f'x{dims[0] if dims else 0} [{lo[0]:.3g}, {hi[0]:.3g}]</text>',
           f'<text x="12" y="{height / 2:.0f}" font-size="12" transform="rotate(-90 12 {height / 2:.0f})" '
           f'text-anchor="middle">x{dims[1] if dims else 1} [{lo[1]:.3g}, {hi[1]:.3g}]</text>']
    for tr, path in zip(trajectories, paths):
        color = PALETTE[tr.class_id % len(PALETTE)]
        coords = " ".join(px(p) for p in path)
        out.append(f'<polyline class="trajectory" data-class="{tr.class_id}" points="{coords}" '
                   f'fill="none" stroke="{color}" stroke-width="1" stroke-opacity="0.7"/>')
        sx, sy = px(path[0]).split(",")
        ex, ey = px(path[-1]).split(",")
        out.append(f'<circle class="start" cx="{sx}" cy="{sy}" r="2.5" fill="{color}"/>')
        out.append(f'<rect class="end" x="{float(ex) - 2.5:.2f}" y="{float(ey) - 2.5:.2f}" width="5" height="5" '
                   f'fill="{color}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_trajectories(trajectory_file, out_svg, dims: tuple[int, int] | None = None) -> Path:
    svg = trajectories_svg(load_trajectories_csv(trajectory_file), dims)
    out = Path(out_svg)
    out.write_text(svg)
    return out
