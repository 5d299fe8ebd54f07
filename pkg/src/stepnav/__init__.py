"""Risk-aware traversability mapping and planning on 2.5D grid maps."""

__version__ = "0.1.0"

from stepnav.grid_map import GridMap2p5D, create_map, load_map, save_map
from stepnav.risk import RiskDistribution, RiskLevel, cvar_gaussian

__all__ = [
    "GridMap2p5D",
    "create_map",
    "load_map",
    "save_map",
    "RiskDistribution",
    "RiskLevel",
    "cvar_gaussian",
]
