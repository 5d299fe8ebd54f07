"""2.5D multi-layer grid map: storage, interpolation, surface normals, file I/O.

Layers are float64 arrays of shape (height, width), row-major with
row = y and col = x.  Missing cells are NaN.  World coordinates of a cell
center are ``origin + resolution * (col, row)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from stepnav.errors import InvalidArgumentError, MapFormatError, OutOfBoundsError

MAP_FILE_VERSION = 1


@dataclass
class GridMap2p5D:
    resolution: float
    origin: tuple[float, float]
    width: int
    height: int
    layers: dict[str, np.ndarray] = field(default_factory=dict)

    def add_layer(self, name: str, data: np.ndarray | float = np.nan) -> np.ndarray:
        if np.isscalar(data):
            arr = np.full((self.height, self.width), float(data))
        else:
            arr = np.asarray(data, dtype=float)
            if arr.shape != (self.height, self.width):
                raise InvalidArgumentError(
                    f"layer {name!r} shape {arr.shape} != {(self.height, self.width)}"
                )
        self.layers[name] = arr
        return arr

    def get_layer(self, name: str) -> np.ndarray:
        try:
            return self.layers[name]
        except KeyError:
            raise InvalidArgumentError(f"no layer named {name!r}") from None

    def has_layer(self, name: str) -> bool:
        return name in self.layers

    # world <-> cell transforms

    def world_of(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin[0] + self.resolution * col,
                self.origin[1] + self.resolution * row)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        """Nearest cell to a world point; raises when outside the extent."""
        col = int(round((x - self.origin[0]) / self.resolution))
        row = int(round((y - self.origin[1]) / self.resolution))
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise OutOfBoundsError(f"point ({x}, {y}) outside map extent")
        return row, col

    def in_extent(self, x: float, y: float) -> bool:
        fx = (x - self.origin[0]) / self.resolution
        fy = (y - self.origin[1]) / self.resolution
        return (-0.5 <= fx <= self.width - 0.5) and (-0.5 <= fy <= self.height - 0.5)

    def copy(self) -> "GridMap2p5D":
        return GridMap2p5D(self.resolution, self.origin, self.width, self.height,
                           {k: v.copy() for k, v in self.layers.items()})


def create_map(width: int, height: int, resolution: float,
               origin: tuple[float, float]) -> GridMap2p5D:
    if width < 1 or height < 1:
        raise InvalidArgumentError(f"width/height must be >= 1, got {width}x{height}")
    if not resolution > 0:
        raise InvalidArgumentError(f"resolution must be > 0, got {resolution}")
    return GridMap2p5D(float(resolution), (float(origin[0]), float(origin[1])),
                       int(width), int(height))


def _continuous_index(m: GridMap2p5D, x, y):
    fx = (np.asarray(x, dtype=float) - m.origin[0]) / m.resolution
    fy = (np.asarray(y, dtype=float) - m.origin[1]) / m.resolution
    bad = (fx < -0.5) | (fx > m.width - 0.5) | (fy < -0.5) | (fy > m.height - 0.5)
    return fx, fy, bad


def sample_bilinear_many(m: GridMap2p5D, layer: str, xs, ys) -> np.ndarray:
    """Vectorized bilinear sampling at world points.

    If any of the four surrounding cells is missing, falls back to the
    nearest non-missing of the four; returns NaN when all four are missing.
    Raises OutOfBoundsError when any point lies outside the extent.
    """
    data = m.get_layer(layer)
    fx, fy, bad = _continuous_index(m, xs, ys)
    if np.any(bad):
        raise OutOfBoundsError("sample point outside map extent")
    # clamp onto the cell-center lattice
    fx = np.clip(fx, 0.0, m.width - 1.0)
    fy = np.clip(fy, 0.0, m.height - 1.0)
    c0 = np.floor(fx).astype(np.intp)
    r0 = np.floor(fy).astype(np.intp)
    c0 = np.minimum(c0, m.width - 2) if m.width > 1 else c0
    r0 = np.minimum(r0, m.height - 2) if m.height > 1 else r0
    c1 = np.minimum(c0 + 1, m.width - 1)
    r1 = np.minimum(r0 + 1, m.height - 1)
    tx = fx - c0
    ty = fy - r0

    v00 = data[r0, c0]
    v01 = data[r0, c1]
    v10 = data[r1, c0]
    v11 = data[r1, c1]
    corners = np.stack([v00, v01, v10, v11])
    any_missing = np.any(np.isnan(corners), axis=0)

    out = ((1 - ty) * ((1 - tx) * v00 + tx * v01)
           + ty * ((1 - tx) * v10 + tx * v11))
    if np.any(any_missing):
        # nearest non-missing corner by interpolation distance
        dists = np.stack([
            tx ** 2 + ty ** 2,
            (1 - tx) ** 2 + ty ** 2,
            tx ** 2 + (1 - ty) ** 2,
            (1 - tx) ** 2 + (1 - ty) ** 2,
        ])
        dists = np.where(np.isnan(corners), np.inf, dists)
        pick = np.argmin(dists, axis=0)
        fallback = np.take_along_axis(corners, pick[None, ...], axis=0)[0]
        all_missing = np.all(np.isnan(corners), axis=0)
        fallback = np.where(all_missing, np.nan, fallback)
        out = np.where(any_missing, fallback, out)
    return out


def sample_bilinear(m: GridMap2p5D, layer: str, p) -> float:
    return float(sample_bilinear_many(m, layer, p[0], p[1]))


def _elevation_gradients(h: np.ndarray, res: float):
    """Central differences with missing neighbors treated as the center value;
    one-sided differences at the borders."""
    filled = h.copy()
    # neighbors, edge-replicated
    left = np.empty_like(h)
    right = np.empty_like(h)
    up = np.empty_like(h)
    down = np.empty_like(h)
    left[:, 1:] = filled[:, :-1]
    left[:, 0] = filled[:, 0]
    right[:, :-1] = filled[:, 1:]
    right[:, -1] = filled[:, -1]
    up[1:, :] = filled[:-1, :]
    up[0, :] = filled[0, :]
    down[:-1, :] = filled[1:, :]
    down[-1, :] = filled[-1, :]
    # missing neighbor -> center value
    left = np.where(np.isnan(left), filled, left)
    right = np.where(np.isnan(right), filled, right)
    up = np.where(np.isnan(up), filled, up)
    down = np.where(np.isnan(down), filled, down)

    denom_x = np.full(h.shape, 2.0 * res)
    denom_x[:, 0] = res
    denom_x[:, -1] = res
    denom_y = np.full(h.shape, 2.0 * res)
    denom_y[0, :] = res
    denom_y[-1, :] = res
    if h.shape[1] == 1:
        dhdx = np.zeros_like(h)
    else:
        dhdx = (right - left) / denom_x
    if h.shape[0] == 1:
        dhdy = np.zeros_like(h)
    else:
        dhdy = (down - up) / denom_y
    return dhdx, dhdy


def compute_surface_normals(m: GridMap2p5D, elevation_layer: str = "elevation") -> GridMap2p5D:
    """Adds unit-normal layers n_x, n_y, n_z from elevation gradients.

    n is proportional to (-dh/dx, -dh/dy, 1); missing elevation cells get
    the vertical normal (0, 0, 1).
    """
    h = m.get_layer(elevation_layer)
    dhdx, dhdy = _elevation_gradients(h, m.resolution)
    missing = np.isnan(h)
    dhdx = np.where(missing | np.isnan(dhdx), 0.0, dhdx)
    dhdy = np.where(missing | np.isnan(dhdy), 0.0, dhdy)
    norm = np.sqrt(dhdx ** 2 + dhdy ** 2 + 1.0)
    m.add_layer("n_x", -dhdx / norm)
    m.add_layer("n_y", -dhdy / norm)
    m.add_layer("n_z", 1.0 / norm)
    return m


def sample_normal(m: GridMap2p5D, xs, ys) -> np.ndarray:
    """Interpolated world-frame surface normal(s), shape (..., 3)."""
    nx = sample_bilinear_many(m, "n_x", xs, ys)
    ny = sample_bilinear_many(m, "n_y", xs, ys)
    nz = sample_bilinear_many(m, "n_z", xs, ys)
    return np.stack([nx, ny, nz], axis=-1)


def elevation_normal_jacobian(m: GridMap2p5D, p) -> np.ndarray:
    """3x2 Jacobian of the interpolated normal field w.r.t. world position.

    Central finite differences with step = resolution / 2; the probe points
    are clamped to the extent so border queries stay well-defined.
    """
    if not m.in_extent(p[0], p[1]):
        raise OutOfBoundsError(f"point {p} outside map extent")
    return normal_jacobian_many(m, [p[0]], [p[1]])[0]


def normal_jacobian_many(m: GridMap2p5D, xs, ys) -> np.ndarray:
    """Batched elevation_normal_jacobian: (N, 3, 2) for N world points."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    hstep = 0.5 * m.resolution
    lo_x = m.origin[0] - 0.499 * m.resolution
    hi_x = m.origin[0] + (m.width - 1 + 0.499) * m.resolution
    lo_y = m.origin[1] - 0.499 * m.resolution
    hi_y = m.origin[1] + (m.height - 1 + 0.499) * m.resolution
    xp = np.clip(xs + hstep, lo_x, hi_x)
    xm = np.clip(xs - hstep, lo_x, hi_x)
    yp = np.clip(ys + hstep, lo_y, hi_y)
    ym = np.clip(ys - hstep, lo_y, hi_y)
    px = np.concatenate([xp, xm, xs, xs])
    py = np.concatenate([ys, ys, yp, ym])
    n = sample_normal(m, px, py).reshape(4, -1, 3)
    J = np.zeros((len(xs), 3, 2))
    dx = (xp - xm)[:, None]
    dy = (yp - ym)[:, None]
    np.divide(n[0] - n[1], dx, out=J[:, :, 0], where=dx > 0)
    np.divide(n[2] - n[3], dy, out=J[:, :, 1], where=dy > 0)
    return J


def save_map(m: GridMap2p5D, path) -> None:
    doc = {
        "version": MAP_FILE_VERSION,
        "resolution": m.resolution,
        "origin": [m.origin[0], m.origin[1]],
        "width": m.width,
        "height": m.height,
        "layers": {
            name: [None if math.isnan(v) else v for v in arr.ravel().tolist()]
            for name, arr in m.layers.items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f)


def load_map(path) -> GridMap2p5D:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise MapFormatError(f"{path}: not valid map text (line {e.lineno}, col {e.colno})") from e
    for key in ("version", "resolution", "origin", "width", "height", "layers"):
        if key not in doc:
            raise MapFormatError(f"{path}: missing field {key!r}")
    if doc["version"] != MAP_FILE_VERSION:
        raise MapFormatError(f"{path}: unsupported version {doc['version']!r}")
    m = create_map(doc["width"], doc["height"], doc["resolution"],
                   (doc["origin"][0], doc["origin"][1]))
    n = m.width * m.height
    for name, values in doc["layers"].items():
        if not isinstance(values, list) or len(values) != n:
            got = len(values) if isinstance(values, list) else type(values).__name__
            raise MapFormatError(
                f"{path}: layer {name!r} has {got} values, expected {n}")
        arr = np.array([np.nan if v is None else float(v) for v in values])
        m.add_layer(name, arr.reshape(m.height, m.width))
    return m
