"""Planner configuration document: one YAML file covering risk factors,
geometric planning, MPC, dynamics, and the simulation harness.

Every field is optional and falls back to the dataclass defaults of the
owning module; unknown fields are rejected with the dotted path of the
offending key.  Top-level sections `geometric`, `mpc`, `dynamics` feed the
single-shot planning commands; `sim` (which nests its own copies of those
three) and `world` feed the closed-loop simulation commands.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from stepnav.errors import ConfigurationError, StepNavError
from stepnav.dynamics import DynamicsModel
from stepnav.geometric import GeomPlanConfig
from stepnav.mpc import MpcConfig
from stepnav.risk import RiskFactorSpec
from stepnav.sim import SimConfig, WorldSpec


def default_risk_factors() -> list:
    """Step + tipover + sensor-uncertainty mix; weights sum to 1."""
    return [
        RiskFactorSpec("step", 0.5, {"max_step": 0.3}),
        RiskFactorSpec("tipover", 0.3, {"critical_slope": 0.7854}),
        RiskFactorSpec("sensor_uncertainty", 0.2, {}),
    ]


@dataclass
class PlannerConfig:
    alpha: float = 0.5
    risk_factors: list = field(default_factory=default_risk_factors)
    geometric: GeomPlanConfig = field(default_factory=GeomPlanConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    dynamics: DynamicsModel = field(default_factory=DynamicsModel)
    world: WorldSpec = field(default_factory=WorldSpec)
    sim: SimConfig = field(default_factory=SimConfig)


_FACTOR_KEYS = {"kind", "weight", "params"}


def _build_factors(value, prefix):
    if not isinstance(value, list):
        raise ConfigurationError(f"{prefix} must be a list of factor specs")
    specs = []
    for i, item in enumerate(value):
        if not isinstance(item, dict):
            raise ConfigurationError(f"{prefix}[{i}] must be a mapping")
        unknown = set(item) - _FACTOR_KEYS
        if unknown:
            raise ConfigurationError(
                f"unknown config field {prefix}[{i}].{sorted(unknown)[0]}")
        if "kind" not in item:
            raise ConfigurationError(f"{prefix}[{i}] is missing 'kind'")
        specs.append(RiskFactorSpec(item["kind"], item.get("weight", 0.0),
                                    dict(item.get("params", {}))))
    return specs


def _build_dataclass(cls, doc, prefix=""):
    if not isinstance(doc, dict):
        raise ConfigurationError(
            f"config section {prefix or cls.__name__!r} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        dotted = f"{prefix}{key}"
        if key not in names:
            raise ConfigurationError(f"unknown config field {dotted!r}")
        if key == "risk_factors":
            kwargs[key] = _build_factors(value, dotted)
            continue
        hint = hints.get(key)
        if isinstance(hint, type) and dataclasses.is_dataclass(hint):
            kwargs[key] = _build_dataclass(hint, value, f"{dotted}.")
        elif hint is tuple:
            if not isinstance(value, (list, tuple)):
                raise ConfigurationError(f"{dotted} must be a list")
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except StepNavError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"bad value in section {prefix or '<root>'}: {e}") from e


def config_from_dict(doc: dict | None) -> PlannerConfig:
    return _build_dataclass(PlannerConfig, doc or {})


def load_config(path) -> PlannerConfig:
    """Parse a YAML planner config; missing sections use module defaults."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: not valid config text ({e})") from e
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return config_from_dict(doc)
