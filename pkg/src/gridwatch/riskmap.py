"""Spatial risk raster: inverse-distance-squared interpolation of bus risk."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from gridwatch.contingency import RiskAssessment
from gridwatch.grid import GridSpec

EPS = 1e-9


@dataclass(frozen=True)
class RiskRaster:
    """``values[row, col]``; row 0 is the northern edge (max y)."""

    values: np.ndarray
    xs: np.ndarray
    ys: np.ndarray

    @property
    def res(self) -> int:
        return self.values.shape[0]

    def region_mean(self, x_range: tuple[float, float], y_range: tuple[float, float]) -> float:
        """Mean over cells whose centres fall in the half-open box ``[lo, hi)``."""
        xx, yy = np.meshgrid(self.xs, self.ys)
        mask = (xx >= x_range[0]) & (xx < x_range[1]) & (yy >= y_range[0]) & (yy < y_range[1])
        if not mask.any():
            raise ValueError("region contains no raster cells")
        return float(self.values[mask].mean())

    def quadrant_means(self) -> dict[str, float]:
        """Means of the south-west quarter and the eastern half of the box."""
        xmid = 0.5 * (self.xs[0] + self.xs[-1])
        ymid = 0.5 * (self.ys[0] + self.ys[-1])
        inf = np.inf
        return {
            "south_west": self.region_mean((-inf, xmid), (-inf, ymid)),
            "east": self.region_mean((xmid, inf), (-inf, inf)),
        }


def interpolate(points: np.ndarray, values: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """IDW with power 2 evaluated on the ``ys`` x ``xs`` grid."""
    xx, yy = np.meshgrid(xs, ys)
    d2 = (xx[..., None] - points[:, 0]) ** 2 + (yy[..., None] - points[:, 1]) ** 2
    w = 1.0 / (d2 + EPS)
    return (w * values).sum(axis=-1) / w.sum(axis=-1)


def risk_surface(assessment: RiskAssessment | dict[int, float], spec: GridSpec, grid_res: int) -> RiskRaster:
    if grid_res < 2:
        raise ValueError("grid_res must be >= 2")
    risk = assessment.bus_risk if isinstance(assessment, RiskAssessment) else assessment
    missing = [b.id for b in spec.buses if b.coord is None]
    if missing:
        raise ValueError(f"buses without coordinates: {missing}")
    pts = np.array([b.coord for b in spec.buses], dtype=float)
    vals = np.array([risk.get(b.id, 0.0) for b in spec.buses], dtype=float)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if np.all(hi - lo == 0):
        raise ValueError("degenerate bounding box: all buses coincide")
    xs = np.linspace(lo[0], hi[0], grid_res)
    ys = np.linspace(hi[1], lo[1], grid_res)
    grid = interpolate(pts, vals, xs, ys)
    peak = grid.max()
    if peak > 0:
        grid = grid / peak
    return RiskRaster(grid, xs, ys)


def raster_csv(raster: RiskRaster) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col", "x", "y", "value"])
    for r in range(raster.res):
        for c in range(raster.values.shape[1]):
            w.writerow([r, c, repr(float(raster.xs[c])), repr(float(raster.ys[r])), repr(float(raster.values[r, c]))])
    return buf.getvalue()


def _color(v: float) -> str:
    # green -> yellow -> red
    v = min(max(v, 0.0), 1.0)
    if v < 0.5:
        r, g = int(510 * v), 200
    else:
        r, g = 255, int(200 * (1 - v) * 2)
    return f"#{r:02x}{g:02x}40"


def raster_svg(raster: RiskRaster, spec: GridSpec, cell: int = 12) -> str:
    rows, cols = raster.values.shape
    width, height = cols * cell, rows * cell
    x0, x1 = raster.xs[0], raster.xs[-1]
    y0, y1 = raster.ys[-1], raster.ys[0]

    def px(x: float, y: float) -> tuple[float, float]:
        sx = (x - x0) / (x1 - x0) if x1 > x0 else 0.5
        sy = (y1 - y) / (y1 - y0) if y1 > y0 else 0.5
        return cell / 2 + sx * (width - cell), cell / 2 + sy * (height - cell)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        "<title>contingency risk</title>",
    ]
    for r in range(rows):
        for c in range(cols):
            out.append(
                f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" '
                f'fill="{_color(raster.values[r, c])}"/>'
            )
    index = spec.bus_index()
    for br in spec.branches:
        if not br.in_service:
            continue
        a, b = spec.buses[index[br.from_bus]].coord, spec.buses[index[br.to_bus]].coord
        if a is None or b is None:
            continue
        (ax, ay), (bx, by) = px(*a), px(*b)
        out.append(f'<line x1="{ax:.1f}" y1="{ay:.1f}" x2="{bx:.1f}" y2="{by:.1f}" stroke="#333" stroke-width="1.5"/>')
    for bus in spec.buses:
        if bus.coord is None:
            continue
        x, y = px(*bus.coord)
        label = escape(bus.name or str(bus.id))
        out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="4" fill="#fff" stroke="#000"><title>{label}</title></circle>')
        out.append(f'<text x="{x + 6:.1f}" y="{y - 6:.1f}" font-size="10" font-family="sans-serif">{bus.id}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
