"""Static rasterization of risk maps and planning overlays.

Output is binary PPM (P6), chosen because it is trivially byte-exact:
identical inputs produce identical files, which keeps golden-file tests
honest.  Cells are colored by risk class -- safe (<= low threshold) white,
moderate shaded yellow to red, risky (> high threshold) black -- and
overlays (paths, polygons, footprints) are drawn on top.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from stepnav.errors import ConfigurationError, InvalidArgumentError
from stepnav.grid_map import GridMap2p5D
from stepnav.polygeom import FootprintSpec, rect_vertices
from stepnav.risk import RiskLevel, cvar_gaussian_values


@dataclass
class RenderStyle:
    thresholds: tuple = (0.05, 0.5)         # safe upper bound, risky lower bound
    safe_color: tuple = (255, 255, 255)
    moderate_low_color: tuple = (255, 255, 0)
    moderate_high_color: tuple = (255, 0, 0)
    risky_color: tuple = (0, 0, 0)
    missing_color: tuple = (128, 128, 128)
    path_color: tuple = (0, 90, 255)
    polygon_color: tuple = (160, 0, 200)
    footprint_color: tuple = (0, 160, 60)
    pixels_per_cell: int = 4

    def __post_init__(self):
        if len(self.thresholds) != 2 or not self.thresholds[0] < self.thresholds[1]:
            raise InvalidArgumentError("thresholds must be strictly increasing")
        if self.pixels_per_cell < 1:
            raise InvalidArgumentError("pixels_per_cell must be >= 1")


@dataclass
class Overlays:
    paths: list = field(default_factory=list)       # (N, 2) world-xy arrays
    polygons: list = field(default_factory=list)    # ConvexPolygon or (N, 2)
    footprints: list = field(default_factory=list)  # (pose, FootprintSpec|None)


def _risk_colors(values: np.ndarray, style: RenderStyle) -> np.ndarray:
    lo, hi = style.thresholds
    img = np.empty(values.shape + (3,), dtype=np.uint8)
    img[:] = style.safe_color
    t = np.clip(np.nan_to_num((values - lo) / (hi - lo)), 0.0, 1.0)[..., None]
    low = np.asarray(style.moderate_low_color, dtype=float)
    high = np.asarray(style.moderate_high_color, dtype=float)
    shade = np.round(low + t * (high - low)).astype(np.uint8)
    moderate = (values > lo) & (values <= hi)
    img[moderate] = shade[moderate]
    img[values > hi] = style.risky_color
    img[np.isnan(values)] = style.missing_color
    return img


def _pixel_of(m: GridMap2p5D, style: RenderStyle, x, y):
    """World xy -> pixel (col, row); row 0 is the top (max-y) edge."""
    ppc = style.pixels_per_cell
    px = (np.asarray(x) - (m.origin[0] - 0.5 * m.resolution)) / m.resolution * ppc
    py = (np.asarray(y) - (m.origin[1] - 0.5 * m.resolution)) / m.resolution * ppc
    return px, m.height * ppc - py


def _draw_polyline(img, m, style, pts, color, closed=False):
    pts = np.asarray(pts, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] < 2:
        raise InvalidArgumentError("overlay polyline needs >= 2 xy points")
    if closed:
        pts = np.vstack([pts, pts[:1]])
    h, w = img.shape[:2]
    xs, ys = _pixel_of(m, style, pts[:, 0], pts[:, 1])
    for i in range(len(pts) - 1):
        n = max(2, int(np.hypot(xs[i + 1] - xs[i], ys[i + 1] - ys[i]) * 2) + 1)
        t = np.linspace(0.0, 1.0, n)
        cols = np.clip(np.floor(xs[i] + t * (xs[i + 1] - xs[i])), 0, w - 1).astype(int)
        rows = np.clip(np.floor(ys[i] + t * (ys[i + 1] - ys[i])), 0, h - 1).astype(int)
        img[rows, cols] = color


def render_map(m: GridMap2p5D, level: RiskLevel, overlays: Overlays | None = None,
               style: RenderStyle | None = None) -> bytes:
    """PPM (P6) image bytes of the map's risk classes plus overlays.

    Risk comes from risk_mu/risk_sigma evaluated at the given level when
    available, otherwise from a prebuilt cvar layer.
    """
    style = style or RenderStyle()
    if m.has_layer("risk_mu") and m.has_layer("risk_sigma"):
        values = cvar_gaussian_values(m.get_layer("risk_mu"),
                                      m.get_layer("risk_sigma"), level)
    elif m.has_layer("cvar"):
        values = m.get_layer("cvar")
    else:
        raise ConfigurationError("required layer 'cvar' is missing "
                                 "(no risk_mu/risk_sigma either)")

    cells = _risk_colors(values, style)
    ppc = style.pixels_per_cell
    img = np.repeat(np.repeat(cells, ppc, axis=0), ppc, axis=1)
    img = img[::-1]  # row 0 of the map is the bottom of the image

    ov = overlays or Overlays()
    for poly in ov.polygons:
        verts = getattr(poly, "vertices", poly)
        _draw_polyline(img, m, style, verts, style.polygon_color, closed=True)
    for pose, spec in ov.footprints:
        verts = rect_vertices(spec or FootprintSpec(), pose)
        _draw_polyline(img, m, style, verts, style.footprint_color, closed=True)
    for path in ov.paths:
        _draw_polyline(img, m, style, np.asarray(path)[:, :2], style.path_color)

    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + img.tobytes()


def write_image(m: GridMap2p5D, level: RiskLevel, path,
                overlays: Overlays | None = None,
                style: RenderStyle | None = None) -> None:
    data = render_map(m, level, overlays, style)
    with open(path, "wb") as f:
        f.write(data)
