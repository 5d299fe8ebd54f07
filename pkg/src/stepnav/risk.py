"""Per-cell Gaussian traversability risk factors, aggregation, and CVaR maps.

Each factor produces (mu, sigma) layers; factors are combined by a weighted
average under an independence assumption, and the closed-form Gaussian CVaR
turns the aggregate into a scalar risk-per-cell layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage
from scipy.stats import norm

from stepnav.errors import ConfigurationError, InvalidArgumentError
from stepnav.grid_map import GridMap2p5D, compute_surface_normals

RISK_CAP = 1.0
SIGMA_FLOOR = 0.01
ALPHA_MAX = 0.999

FACTOR_KINDS = (
    "collision",
    "step",
    "tipover",
    "contact_loss",
    "slippage",
    "sensor_uncertainty",
)


@lru_cache(maxsize=256)
def _tail_multiplier(a: float) -> float:
    return float(norm.pdf(norm.ppf(a)) / (1.0 - a))


@dataclass(frozen=True)
class RiskLevel:
    alpha: float

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise InvalidArgumentError(f"alpha must be in (0, 1), got {self.alpha}")

    def tail_multiplier(self) -> float:
        """phi(Phi^-1(alpha)) / (1 - alpha), with alpha capped away from 1."""
        return _tail_multiplier(min(self.alpha, ALPHA_MAX))


@dataclass(frozen=True)
class RiskDistribution:
    mu: float
    sigma: float

    def __post_init__(self):
        if self.mu < 0 or self.sigma < 0:
            raise InvalidArgumentError(
                f"mu and sigma must be >= 0, got ({self.mu}, {self.sigma})")


@dataclass
class RiskFactorSpec:
    kind: str
    weight: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise InvalidArgumentError(f"unknown risk factor kind {self.kind!r}")
        if self.weight < 0:
            raise InvalidArgumentError("factor weight must be >= 0")


def cvar_gaussian(r: RiskDistribution, level: RiskLevel) -> float:
    return r.mu + r.sigma * level.tail_multiplier()


def cvar_gaussian_values(mu, sigma, level: RiskLevel):
    """Vectorized CVaR of N(mu, sigma^2) tails at the given risk level."""
    return np.asarray(mu) + np.asarray(sigma) * level.tail_multiplier()


def _ramp(signal, benign, lethal):
    """Linear hazard ramp, clamped to [0, RISK_CAP]."""
    if lethal <= benign:
        raise InvalidArgumentError("lethal threshold must exceed benign threshold")
    return np.clip((signal - benign) / (lethal - benign), 0.0, 1.0) * RISK_CAP


def _require_layer(m: GridMap2p5D, name: str):
    if not m.has_layer(name):
        raise ConfigurationError(f"required layer {name!r} is missing")
    return m.get_layer(name)


def _distance_from(m: GridMap2p5D, origin) -> np.ndarray:
    cols = m.origin[0] + m.resolution * np.arange(m.width)
    rows = m.origin[1] + m.resolution * np.arange(m.height)
    xx, yy = np.meshgrid(cols, rows)
    return np.hypot(xx - origin[0], yy - origin[1])


def _step_factor(m, p):
    h = _require_layer(m, "elevation")
    missing = np.isnan(h)
    filled = np.where(missing, 0.0, h)
    gap = np.zeros_like(filled)
    # max |height difference| over the 8-neighborhood; missing neighbors ignored
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            shifted = np.full_like(filled, np.nan)
            rs = slice(max(dr, 0), filled.shape[0] + min(dr, 0))
            rd = slice(max(-dr, 0), filled.shape[0] + min(-dr, 0))
            cs = slice(max(dc, 0), filled.shape[1] + min(dc, 0))
            cd = slice(max(-dc, 0), filled.shape[1] + min(-dc, 0))
            shifted[rd, cd] = h[rs, cs]
            diff = np.abs(filled - shifted)
            valid = ~np.isnan(diff)
            gap[valid] = np.maximum(gap[valid], diff[valid])
    mu = _ramp(gap, p.get("benign_step", 0.0), p["max_step"])
    sigma = np.full(mu.shape, p.get("sigma_floor", SIGMA_FLOOR) + p.get("loc_sigma", 0.0))
    # negative obstacles: no measurement in the cell
    mu[missing] = RISK_CAP
    if "sensor_origin" in p:
        dist = _distance_from(m, p["sensor_origin"])
        sigma[missing] += p.get("neg_obstacle_sigma_rate", 0.02) * dist[missing]
    return mu, sigma


def _tipover_factor(m, p):
    if not m.has_layer("n_z"):
        if m.has_layer("elevation"):
            compute_surface_normals(m)
        else:
            raise ConfigurationError("required layer 'n_z' is missing (run normals first)")
    nz = np.clip(m.get_layer("n_z"), -1.0, 1.0)
    slope = np.arccos(nz)
    mu = _ramp(slope, p.get("benign_slope", 0.0), p["critical_slope"])
    sigma = np.full(mu.shape, p.get("sigma_floor", SIGMA_FLOOR) + p.get("loc_sigma", 0.0))
    return mu, sigma


def _collision_factor(m, p):
    h = _require_layer(m, "elevation")
    obstacle = np.nan_to_num(h, nan=-np.inf) >= p.get("obstacle_height", 0.5)
    clearance = p.get("clearance", 1.0)
    if np.any(obstacle):
        dist = ndimage.distance_transform_edt(~obstacle) * m.resolution
    else:
        dist = np.full(h.shape, np.inf)
    mu = np.clip(1.0 - dist / clearance, 0.0, 1.0) * RISK_CAP
    sigma = np.full(mu.shape, p.get("sigma_floor", SIGMA_FLOOR) + p.get("loc_sigma", 0.0))
    return mu, sigma


def _contact_loss_factor(m, p):
    h = _require_layer(m, "elevation")
    size = int(p.get("window", 5))
    filled = np.where(np.isnan(h), np.nanmean(h) if np.any(~np.isnan(h)) else 0.0, h)
    cols = np.arange(m.width, dtype=float)[None, :] * np.ones((m.height, 1))
    rows = np.arange(m.height, dtype=float)[:, None] * np.ones((1, m.width))
    uf = lambda a: ndimage.uniform_filter(a, size=size, mode="nearest")
    # local least-squares plane fit residual from windowed moments
    var_h = uf(filled ** 2) - uf(filled) ** 2
    cov_xh = uf(cols * filled) - uf(cols) * uf(filled)
    cov_yh = uf(rows * filled) - uf(rows) * uf(filled)
    var_x = uf(cols ** 2) - uf(cols) ** 2
    var_y = uf(rows ** 2) - uf(rows) ** 2
    explained = np.zeros_like(var_h)
    np.divide(cov_xh ** 2, var_x, out=explained, where=var_x > 1e-12)
    explained2 = np.zeros_like(var_h)
    np.divide(cov_yh ** 2, var_y, out=explained2, where=var_y > 1e-12)
    resid = np.sqrt(np.clip(var_h - explained - explained2, 0.0, None))
    mu = _ramp(resid, p.get("benign_residual", 0.0), p.get("max_residual", 0.1))
    sigma = np.full(mu.shape, p.get("sigma_floor", SIGMA_FLOOR) + p.get("loc_sigma", 0.0))
    return mu, sigma


def _slippage_factor(m, p):
    layer = p.get("input_layer", "slippage_input")
    values = _require_layer(m, layer)
    mu = np.clip(np.nan_to_num(values, nan=0.0), 0.0, RISK_CAP)
    sigma = np.full(mu.shape, p.get("sigma_floor", SIGMA_FLOOR))
    return mu, sigma


def _sensor_uncertainty_factor(m, p):
    origin = p.get("sensor_origin", m.origin)
    dist = _distance_from(m, origin)
    mu = np.zeros((m.height, m.width))
    sigma = p.get("sigma_floor", SIGMA_FLOOR) + p.get("sigma_rate", 0.02) * dist
    return mu, sigma


_FACTOR_FNS = {
    "step": _step_factor,
    "tipover": _tipover_factor,
    "collision": _collision_factor,
    "contact_loss": _contact_loss_factor,
    "slippage": _slippage_factor,
    "sensor_uncertainty": _sensor_uncertainty_factor,
}


def compute_risk_factor(m: GridMap2p5D, spec: RiskFactorSpec):
    """Returns (mu_layer, sigma_layer) for one factor, values in [0, RISK_CAP]."""
    mu, sigma = _FACTOR_FNS[spec.kind](m, spec.params)
    mu = np.clip(mu, 0.0, RISK_CAP)
    return mu, np.maximum(sigma, 0.0)


def aggregate_risk(factors):
    """Weighted average of independent Gaussian factors.

    factors: iterable of (mu_layer, sigma_layer, weight); weights must sum
    to 1 within 1e-9.  Returns (mu, sigma) with sigma^2 = sum w^2 sigma^2.
    """
    factors = list(factors)
    if not factors:
        raise InvalidArgumentError("need at least one risk factor")
    shape = np.asarray(factors[0][0]).shape
    total_w = sum(w for _, _, w in factors)
    if abs(total_w - 1.0) > 1e-9:
        raise InvalidArgumentError(f"factor weights sum to {total_w}, expected 1")
    mu = np.zeros(shape)
    var = np.zeros(shape)
    for f_mu, f_sigma, w in factors:
        f_mu = np.asarray(f_mu)
        f_sigma = np.asarray(f_sigma)
        if f_mu.shape != shape or f_sigma.shape != shape:
            raise InvalidArgumentError("risk factor layer shape mismatch")
        mu += w * f_mu
        var += (w * f_sigma) ** 2
    return np.clip(mu, 0.0, RISK_CAP), np.sqrt(var)


def build_cvar_layer(m: GridMap2p5D, level: RiskLevel) -> np.ndarray:
    """Adds/overwrites the 'cvar' layer from aggregated risk_mu/risk_sigma."""
    for name in ("risk_mu", "risk_sigma"):
        if not m.has_layer(name):
            raise ConfigurationError(f"required layer {name!r} is missing")
    cvar = cvar_gaussian_values(m.get_layer("risk_mu"), m.get_layer("risk_sigma"), level)
    m.add_layer("cvar", cvar)
    return cvar


def build_risk_layers(m: GridMap2p5D, specs, level: RiskLevel) -> GridMap2p5D:
    """Full pipeline: per-factor layers, aggregate, CVaR; stores reserved names."""
    factors = []
    for spec in specs:
        mu, sigma = compute_risk_factor(m, spec)
        m.add_layer(f"{spec.kind}_mu", mu)
        m.add_layer(f"{spec.kind}_sigma", sigma)
        factors.append((mu, sigma, spec.weight))
    mu, sigma = aggregate_risk(factors)
    m.add_layer("risk_mu", mu)
    m.add_layer("risk_sigma", sigma)
    build_cvar_layer(m, level)
    return m
