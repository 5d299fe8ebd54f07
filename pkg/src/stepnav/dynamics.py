"""Robot dynamics: 4-state differential drive and 6-state holonomic-capable
models, explicit-Euler stepping, analytic Jacobians, and rollouts."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from stepnav.errors import InvalidArgumentError

DIFF_DRIVE = "diff_drive"
GENERAL6 = "general6"

# state component indices (shared prefix for both variants)
PX, PY, PTH, VX = 0, 1, 2, 3
VY, VTH = 4, 5


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    wrapped = np.arctan2(np.sin(theta), np.cos(theta))
    return np.where(wrapped == -np.pi, np.pi, wrapped) if np.ndim(wrapped) else (
        math.pi if wrapped == -math.pi else float(wrapped))


@dataclass
class DynamicsModel:
    variant: str = DIFF_DRIVE
    dt: float = 0.2
    mix: float = 0.0            # turn-in-place mixing constant (gamma/kappa)
    a_max: tuple = (1.0, 1.0, 1.0)
    v_max: tuple = (1.5, 1.5, 1.5)

    def __post_init__(self):
        if self.variant not in (DIFF_DRIVE, GENERAL6):
            raise InvalidArgumentError(f"unknown dynamics variant {self.variant!r}")
        if self.dt <= 0:
            raise InvalidArgumentError("dt must be > 0")
        if not (0.0 <= self.mix <= 1.0):
            raise InvalidArgumentError("mixing constant must be in [0, 1]")
        if any(a <= 0 for a in self.a_max) or any(v <= 0 for v in self.v_max):
            raise InvalidArgumentError("limits must be > 0")

    @property
    def nx(self) -> int:
        return 4 if self.variant == DIFF_DRIVE else 6

    @property
    def nu(self) -> int:
        return 2 if self.variant == DIFF_DRIVE else 3

    def control_bounds(self):
        """(lower, upper) per control axis."""
        if self.variant == DIFF_DRIVE:
            lo = np.array([-self.a_max[0], -self.v_max[2]])
            hi = np.array([self.a_max[0], self.v_max[2]])
        else:
            lo = -np.asarray(self.a_max, dtype=float)
            hi = np.asarray(self.a_max, dtype=float)
        return lo, hi


def step(model: DynamicsModel, x, u):
    """One explicit-Euler step x + dt * dx; heading wrapped to (-pi, pi]."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    dt = model.dt
    th = x[PTH]
    c, s = math.cos(th), math.sin(th)
    out = x.copy()
    if model.variant == DIFF_DRIVE:
        vx = x[VX]
        a_x, v_th = u
        out[PX] += dt * vx * c
        out[PY] += dt * vx * s
        out[PTH] += dt * (model.mix * vx + (1.0 - model.mix) * v_th)
        out[VX] += dt * a_x
    else:
        vx, vy, vth = x[VX], x[VY], x[VTH]
        out[PX] += dt * (vx * c - vy * s)
        out[PY] += dt * (vx * s + vy * c)
        out[PTH] += dt * (model.mix * vx + (1.0 - model.mix) * vth)
        out[VX] += dt * u[0]
        out[VY] += dt * u[1]
        out[VTH] += dt * u[2]
    out[PTH] = wrap_angle(out[PTH])
    return out


def linearize(model: DynamicsModel, x, u):
    """Analytic Jacobians (A, B) of step() at (x, u)."""
    x = np.asarray(x, dtype=float)
    dt = model.dt
    th = x[PTH]
    c, s = math.cos(th), math.sin(th)
    nx, nu = model.nx, model.nu
    A = np.eye(nx)
    B = np.zeros((nx, nu))
    if model.variant == DIFF_DRIVE:
        vx = x[VX]
        A[PX, PTH] = -dt * vx * s
        A[PX, VX] = dt * c
        A[PY, PTH] = dt * vx * c
        A[PY, VX] = dt * s
        A[PTH, VX] = dt * model.mix
        B[PTH, 1] = dt * (1.0 - model.mix)
        B[VX, 0] = dt
    else:
        vx, vy = x[VX], x[VY]
        A[PX, PTH] = dt * (-vx * s - vy * c)
        A[PX, VX] = dt * c
        A[PX, VY] = -dt * s
        A[PY, PTH] = dt * (vx * c - vy * s)
        A[PY, VX] = dt * s
        A[PY, VY] = dt * c
        A[PTH, VX] = dt * model.mix
        A[PTH, VTH] = dt * (1.0 - model.mix)
        B[VX, 0] = dt
        B[VY, 1] = dt
        B[VTH, 2] = dt
    return A, B


@dataclass
class Trajectory:
    states: np.ndarray          # (T+1, nx)
    controls: np.ndarray        # (T, nu)
    dt: float

    @property
    def horizon(self) -> int:
        return len(self.controls)

    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    def to_dict(self):
        return {"dt": self.dt,
                "states": self.states.tolist(),
                "controls": self.controls.tolist()}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)


def rollout(model: DynamicsModel, x0, controls) -> Trajectory:
    controls = np.atleast_2d(np.asarray(controls, dtype=float)) if len(controls) \
        else np.zeros((0, model.nu))
    states = np.empty((len(controls) + 1, model.nx))
    states[0] = np.asarray(x0, dtype=float)
    for k, u in enumerate(controls):
        states[k + 1] = step(model, states[k], u)
    return Trajectory(states=states, controls=controls, dt=model.dt)


def rollout_batch(model: DynamicsModel, x0, control_batch) -> np.ndarray:
    """Rollout many control sequences at once.

    control_batch: (N, T, nu).  Returns states (N, T+1, nx).  Used for
    trajectory-library scoring where per-candidate python loops would
    dominate the planning cycle.
    """
    control_batch = np.asarray(control_batch, dtype=float)
    N, T, _ = control_batch.shape
    states = np.empty((N, T + 1, model.nx))
    states[:, 0, :] = np.asarray(x0, dtype=float)
    dt = model.dt
    mix = model.mix
    for k in range(T):
        xk = states[:, k, :]
        th = xk[:, PTH]
        c, s = np.cos(th), np.sin(th)
        nxt = xk.copy()
        if model.variant == DIFF_DRIVE:
            vx = xk[:, VX]
            nxt[:, PX] += dt * vx * c
            nxt[:, PY] += dt * vx * s
            nxt[:, PTH] += dt * (mix * vx + (1 - mix) * control_batch[:, k, 1])
            nxt[:, VX] += dt * control_batch[:, k, 0]
        else:
            vx, vy = xk[:, VX], xk[:, VY]
            nxt[:, PX] += dt * (vx * c - vy * s)
            nxt[:, PY] += dt * (vx * s + vy * c)
            nxt[:, PTH] += dt * (mix * vx + (1 - mix) * xk[:, VTH])
            nxt[:, VX:] += dt * control_batch[:, k, :]
        th_next = nxt[:, PTH]
        wrapped = np.arctan2(np.sin(th_next), np.cos(th_next))
        nxt[:, PTH] = np.where(wrapped == -np.pi, np.pi, wrapped)
        states[:, k + 1, :] = nxt
    return states
