import numpy as np
import pytest

from stepnav.errors import ConfigurationError, InvalidArgumentError
from stepnav.grid_map import create_map
from stepnav.render import Overlays, RenderStyle, render_map, write_image
from stepnav.risk import RiskLevel


def map_with_mu(mu):
    mu = np.asarray(mu, dtype=float)
    m = create_map(mu.shape[1], mu.shape[0], 0.25, (0.0, 0.0))
    m.add_layer("risk_mu", mu)
    m.add_layer("risk_sigma", np.zeros_like(mu))
    return m


def parse_ppm(data: bytes):
    header, _, rest = data.partition(b"255\n")
    magic, dims = header.split(b"\n")[:2]
    assert magic == b"P6"
    w, h = (int(v) for v in dims.split())
    img = np.frombuffer(rest, dtype=np.uint8).reshape(h, w, 3)
    return img


def test_header_and_dimensions():
    m = map_with_mu(np.zeros((5, 7)))
    img = parse_ppm(render_map(m, RiskLevel(0.5)))
    assert img.shape == (5 * 4, 7 * 4, 3)
    style = RenderStyle(pixels_per_cell=1)
    assert parse_ppm(render_map(m, RiskLevel(0.5), style=style)).shape == (5, 7, 3)


def test_safe_map_is_all_white():
    m = map_with_mu(np.zeros((4, 4)))
    img = parse_ppm(render_map(m, RiskLevel(0.5)))
    assert np.all(img == 255)


def test_risky_cell_is_black_and_flipped():
    mu = np.zeros((4, 4))
    mu[0, 1] = 0.8  # map row 0 -> bottom rows of the image
    m = map_with_mu(mu)
    img = parse_ppm(render_map(m, RiskLevel(0.5), style=RenderStyle(pixels_per_cell=1)))
    assert tuple(img[3, 1]) == (0, 0, 0)
    assert np.all(img[0] == 255)


def test_moderate_shading_interpolates():
    style = RenderStyle(pixels_per_cell=1)
    lo, hi = style.thresholds
    m = map_with_mu([[lo + 1e-6, 0.5 * (lo + hi), hi]])
    img = parse_ppm(render_map(m, RiskLevel(0.5), style=style))
    assert tuple(img[0, 0]) == (255, 255, 0)        # just past safe: yellow
    assert img[0, 1][0] == 255 and img[0, 1][2] == 0
    assert abs(int(img[0, 1][1]) - 128) <= 1        # midpoint shade
    assert tuple(img[0, 2]) == (255, 0, 0)          # at the upper edge: red


def test_missing_values_are_gray():
    mu = np.zeros((3, 3))
    mu[1, 1] = np.nan
    m = map_with_mu(mu)
    img = parse_ppm(render_map(m, RiskLevel(0.5), style=RenderStyle(pixels_per_cell=1)))
    assert tuple(img[1, 1]) == (128, 128, 128)


def test_cvar_layer_fallback_and_missing_layers():
    m = create_map(3, 3, 0.25, (0.0, 0.0))
    with pytest.raises(ConfigurationError, match="cvar"):
        render_map(m, RiskLevel(0.5))
    m.add_layer("cvar", np.full((3, 3), 0.9))
    img = parse_ppm(render_map(m, RiskLevel(0.5), style=RenderStyle(pixels_per_cell=1)))
    assert np.all(img == 0)


def test_render_is_byte_identical():
    mu = np.random.default_rng(0).uniform(0, 1, (8, 8))
    m = map_with_mu(mu)
    ov = Overlays(paths=[np.array([[0.2, 0.2], [1.5, 1.5]])])
    assert render_map(m, RiskLevel(0.7), ov) == render_map(m, RiskLevel(0.7), ov)


def test_alpha_changes_classification():
    mu = np.full((4, 4), 0.3)
    m = map_with_mu(mu)
    m.add_layer("risk_sigma", np.full((4, 4), 0.2))
    low = parse_ppm(render_map(m, RiskLevel(0.05), style=RenderStyle(pixels_per_cell=1)))
    high = parse_ppm(render_map(m, RiskLevel(0.95), style=RenderStyle(pixels_per_cell=1)))
    assert not np.array_equal(low, high)
    assert np.all(high[0, 0] == 0)  # cvar(0.3, 0.2, 0.95) > 0.5 -> risky


def test_overlays_draw_on_top():
    m = map_with_mu(np.zeros((8, 8)))
    base = parse_ppm(render_map(m, RiskLevel(0.5)))
    ov = Overlays(paths=[np.array([[0.2, 0.2], [1.6, 1.6]])],
                  footprints=[((1.0, 1.0, 0.0), None)])
    img = parse_ppm(render_map(m, RiskLevel(0.5), ov))
    assert np.any(np.all(img == (0, 90, 255), axis=-1))
    assert np.any(np.all(img == (0, 160, 60), axis=-1))
    assert (np.all(img == 255, axis=-1).sum()
            < np.all(base == 255, axis=-1).sum())


def test_polygon_overlay_accepts_raw_vertices():
    m = map_with_mu(np.zeros((8, 8)))
    ov = Overlays(polygons=[np.array([[0.3, 0.3], [1.5, 0.3], [1.0, 1.4]])])
    img = parse_ppm(render_map(m, RiskLevel(0.5), ov))
    assert np.any(np.all(img == (160, 0, 200), axis=-1))


def test_style_validation():
    with pytest.raises(InvalidArgumentError):
        RenderStyle(thresholds=(0.5, 0.5))
    with pytest.raises(InvalidArgumentError):
        RenderStyle(thresholds=(0.7, 0.2))
    with pytest.raises(InvalidArgumentError):
        RenderStyle(pixels_per_cell=0)


def test_bad_overlay_rejected():
    m = map_with_mu(np.zeros((4, 4)))
    with pytest.raises(InvalidArgumentError):
        render_map(m, RiskLevel(0.5), Overlays(paths=[np.array([[1.0, 1.0]])]))


def test_write_image_matches_render(tmp_path):
    m = map_with_mu(np.zeros((4, 4)))
    p = tmp_path / "map.ppm"
    write_image(m, RiskLevel(0.5), p)
    assert p.read_bytes() == render_map(m, RiskLevel(0.5))
