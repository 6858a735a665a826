"""Experimental setups and the alternating fluid / rigid-body step."""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fluid import FACE_FREE, FluidParams, Grid, boundary_flags, face_classes
from .rigid_body import BodyProperties, BodyShape, BodyState, rasterize

ENVIRONMENT_IDS = ("BaseNR", "BuoyNR", "Base", "Inflow", "InBuoy", "Hold")

# id: (inflow, buoyancy, forcing, dof, Re)
_TABLE = {
    "BaseNR": (False, False, False, 2, 1000.0),
    "BuoyNR": (False, True, False, 2, 1000.0),
    "Base": (False, False, False, 3, 1000.0),
    "Inflow": (True, False, False, 3, 3000.0),
    "InBuoy": (True, True, False, 3, 3000.0),
    "Hold": (True, True, True, 3, 3000.0),
}

CYLINDER = BodyShape.cylinder(5.0)
CYLINDER_PROPS = BodyProperties(m=11.78, I=0.5 * 11.78 * 5.0**2)
BOX = BodyShape.box(20.0, 6.0)
BOX_PROPS = BodyProperties(m=36.0, I=4000.0)


class EffortClampWarning(RuntimeWarning):
    """A control effort exceeded its bound and was clamped."""


@dataclass(frozen=True)
class ForcingWindow:
    t_start: float
    t_end: float
    force: tuple[float, float] = (0.0, 0.0)
    torque: float = 0.0


@dataclass(frozen=True)
class ForcingSchedule:
    windows: tuple[ForcingWindow, ...] = ()

    def __post_init__(self):
        spans = sorted((w.t_start, w.t_end) for w in self.windows)
        for (a0, a1), (b0, _) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError("forcing windows overlap")
        for a0, a1 in spans:
            if a1 <= a0:
                raise ValueError("forcing window must have t_end > t_start")


HOLD_FORCING = ForcingSchedule((
    ForcingWindow(100.0, 180.0, (25.0, 0.0), 0.0),
    ForcingWindow(250.0, 330.0, (0.0, 25.0), 0.0),
    ForcingWindow(380.0, 460.0, (0.0, 0.0), 1000.0),
))


def external_forcing(schedule: ForcingSchedule | None, t: float):
    """Force and torque of the window containing ``t`` (end exclusive), else zeros."""
    if schedule is not None:
        for w in schedule.windows:
            if w.t_start <= t < w.t_end:
                return np.array(w.force, dtype=float), float(w.torque)
    return np.zeros(2), 0.0


@dataclass(frozen=True)
class Objective:
    start_time: float
    x_obj: tuple[float, float]
    alpha_obj: float = 0.0


@dataclass(frozen=True)
class ObjectiveSchedule:
    """Piecewise-constant targets; each objective holds until the next start time."""

    objectives: tuple[Objective, ...]

    def __post_init__(self):
        if not self.objectives:
            raise ValueError("schedule needs at least one objective")
        times = [o.start_time for o in self.objectives]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("objective start times must be strictly increasing")

    @classmethod
    def single(cls, x_obj, alpha_obj: float = 0.0) -> ObjectiveSchedule:
        return cls((Objective(0.0, tuple(map(float, x_obj)), float(alpha_obj)),))

    @classmethod
    def sequence(cls, targets: Sequence, hold: float) -> ObjectiveSchedule:
        """Targets ``(x, y)`` or ``(x, y, alpha)``, each held for ``hold`` time units."""
        objs = []
        for k, tgt in enumerate(targets):
            alpha = float(tgt[2]) if len(tgt) > 2 else 0.0
            objs.append(Objective(k * hold, (float(tgt[0]), float(tgt[1])), alpha))
        return cls(tuple(objs))

    def index_at(self, t: float) -> int:
        idx = 0
        for k, o in enumerate(self.objectives):
            if t + 1e-9 >= o.start_time:
                idx = k
        return idx

    def at(self, t: float) -> Objective:
        return self.objectives[self.index_at(t)]

    def segments(self, dt: float, n_steps: int) -> list[tuple[int, int]]:
        """Half-open step ranges during which each objective is tracked."""
        starts = [int(round(o.start_time / dt)) for o in self.objectives]
        bounds = []
        for k, s in enumerate(starts):
            e = starts[k + 1] if k + 1 < len(starts) else n_steps
            s, e = min(s, n_steps), min(e, n_steps)
            bounds.append((s, e))
        return bounds


@dataclass(frozen=True)
class EnvironmentConfig:
    id: str
    inflow: bool
    buoyancy: bool
    forcing: bool
    dof: int
    Re: float
    shape: BodyShape
    props: BodyProperties
    fluid: FluidParams
    controller_sample_stride: int = 1
    resolution: int = 100
    domain: float = 100.0
    episode_length: int = 1000
    F_max: float = 50.0
    T_max: float = 2000.0
    initial_position: tuple[float, float] = (40.0, 40.0)
    source_center: float = 50.0
    source_width: float = 10.0
    forcing_schedule: ForcingSchedule = field(default_factory=ForcingSchedule)

    def __post_init__(self):
        if self.dof not in (2, 3):
            raise ValueError("dof must be 2 or 3")
        if self.resolution < 8:
            raise ValueError("resolution must be at least 8")
        if self.controller_sample_stride < 1:
            raise ValueError("controller_sample_stride must be >= 1")
        if abs(self.fluid.Re - self.Re) > 0:
            raise ValueError("fluid.Re must equal Re")

    @property
    def grid(self) -> Grid:
        return Grid.square(self.resolution, self.domain)

    @property
    def dt(self) -> float:
        return self.fluid.dt

    def base_flags(self) -> np.ndarray:
        return boundary_flags(self.grid, inflow=self.inflow)

    def source_mask(self) -> np.ndarray:
        g = self.grid
        X, _ = g.cell_centers()
        mask = np.zeros((g.ny, g.nx), dtype=bool)
        mask[1, :] = np.abs(X[1, :] - self.source_center) <= 0.5 * self.source_width
        return mask


_FLUID_KEYS = {f.name for f in dataclasses.fields(FluidParams)} - {"Re"}


def make_environment(env_id: str, overrides: dict | None = None) -> EnvironmentConfig:
    """Materialise one row of the experiment table, optionally patched.

    ``overrides`` may name any :class:`EnvironmentConfig` field or any
    :class:`FluidParams` field (``dt``, ``rho``, ...). ``Re`` updates both.
    """
    if env_id not in _TABLE:
        raise ValueError(f"unknown environment {env_id!r}; valid ids: {', '.join(ENVIRONMENT_IDS)}")
    inflow, buoyancy, forcing, dof, Re = _TABLE[env_id]
    fast = Re >= 3000.0
    fluid = FluidParams(Re=Re, dt=0.05 if fast else 0.1)
    base = dict(
        id=env_id, inflow=inflow, buoyancy=buoyancy, forcing=forcing, dof=dof, Re=Re,
        shape=CYLINDER if dof == 2 else BOX,
        props=CYLINDER_PROPS if dof == 2 else BOX_PROPS,
        fluid=fluid,
        controller_sample_stride=2 if fast else 1,
        forcing_schedule=HOLD_FORCING if forcing else ForcingSchedule(),
    )
    overrides = dict(overrides or {})
    fluid_patch = {k: overrides.pop(k) for k in list(overrides) if k in _FLUID_KEYS}
    if "Re" in overrides:
        fluid_patch["Re"] = overrides["Re"]
    valid = {f.name for f in dataclasses.fields(EnvironmentConfig)}
    unknown = set(overrides) - valid
    if unknown:
        raise ValueError(f"unknown environment override(s): {', '.join(sorted(unknown))}")
    base.update(overrides)
    base["fluid"] = dataclasses.replace(base["fluid"], **fluid_patch)
    return EnvironmentConfig(**base)


# --------------------------------------------------------------------------
# state and stepping

@dataclass
class SimState:
    """Coupled fluid / body state. Differentiable members are tensors."""

    ux: Tensor
    uy: Tensor
    pressure: Tensor
    marker: Tensor
    pos: Tensor
    alpha: Tensor
    vel: Tensor
    omega: Tensor
    flags: np.ndarray
    t: float = 0.0
    step_index: int = 0
    last_force: Tensor = field(default_factory=lambda: Tensor(np.zeros(2)))
    last_torque: Tensor = field(default_factory=lambda: Tensor(0.0))
    fluid_force: np.ndarray = field(default_factory=lambda: np.zeros(2))
    fluid_torque: float = 0.0
    seed: int = 0

    @property
    def body(self) -> BodyState:
        return BodyState(self.pos.value, float(self.alpha.value), self.vel.value, float(self.omega.value))

    def detached(self) -> SimState:
        """Copy with every tensor cut from its tape."""
        out = dataclasses.replace(self)
        for name in ("ux", "uy", "pressure", "marker", "pos", "alpha", "vel", "omega",
                     "last_force", "last_torque"):
            setattr(out, name, getattr(self, name).detach())
        return out


def reset(cfg: EnvironmentConfig, objectives: ObjectiveSchedule | None = None, seed: int = 0) -> SimState:
    """Quiescent fluid, body at rest at the initial position with zero angle."""
    g = cfg.grid
    ux, uy = g.zeros_velocity()
    body = BodyState(cfg.initial_position, 0.0)
    flags, _ = rasterize(cfg.shape, body, g, cfg.base_flags())
    zeros = np.zeros((g.ny, g.nx))
    return SimState(
        ux=Tensor(ux), uy=Tensor(uy), pressure=Tensor(zeros), marker=Tensor(zeros),
        pos=Tensor(body.x_r), alpha=Tensor(0.0), vel=Tensor(np.zeros(2)), omega=Tensor(0.0),
        flags=flags, seed=seed,
    )


def _clamp_efforts(force, torque, cfg: EnvironmentConfig):
    fv = ad.value_of(force)
    tv = float(ad.value_of(torque))
    if np.any(np.abs(fv) > cfg.F_max) or abs(tv) > cfg.T_max:
        warnings.warn(f"control effort ({fv}, {tv}) clamped to bounds ({cfg.F_max}, {cfg.T_max})",
                      EffortClampWarning, stacklevel=3)
        scale_f = np.where(np.abs(fv) > cfg.F_max, cfg.F_max / np.maximum(np.abs(fv), 1e-300), 1.0)
        force = ad.mul(force, scale_f)
        if abs(tv) > cfg.T_max:
            torque = ad.mul(torque, cfg.T_max / abs(tv))
    return force, torque


def step(state: SimState, control, cfg: EnvironmentConfig, forcing: ForcingSchedule | None = None,
         clamp: bool = True) -> SimState:
    """Advance the coupled system by one time step.

    ``control`` is ``(F_c, T_c)`` in the world frame; tensors on a tape are
    differentiated through. Order: rasterize, boundary conditions, advection,
    diffusion, buoyancy, boundary conditions, projection, pressure load,
    body integration. Raises :class:`~fluidctl.rigid_body.BodyOutOfDomain`
    when the body reaches the boundary ring.
    """
    g = cfg.grid
    fp = cfg.fluid
    dt = fp.dt
    force_c, torque_c = control
    if cfg.dof == 2:
        torque_c = Tensor(0.0)
    if clamp:
        force_c, torque_c = _clamp_efforts(force_c, torque_c, cfg)

    flags, samples = rasterize(cfg.shape, state.body, g, cfg.base_flags())
    cx, cy = face_classes(flags)
    bc = dict(grid=g, cls_x=cx, cls_y=cy, inflow_speed=fp.inflow_speed if cfg.inflow else 0.0)

    ux, uy = ad.record("fluid.boundary_conditions", state.ux, state.uy, state.pos, state.vel,
                       state.omega, **bc)
    marker = state.marker
    if cfg.buoyancy:
        marker = ad.record("fluid.advect_scalar", marker, ux, uy, grid=g, dt=dt)
        marker = ad.record("fluid.marker_source", marker, source_mask=cfg.source_mask())
    ux, uy = ad.record("fluid.advect_velocity", ux, uy, grid=g, dt=dt)
    ux, uy = ad.record("fluid.diffuse", ux, uy, grid=g, nu=fp.nu, dt=dt,
                       free_x=cx == FACE_FREE, free_y=cy == FACE_FREE)
    if cfg.buoyancy:
        uy = ad.record("fluid.buoyancy", uy, marker, coeff=fp.buoyancy_coeff, dt=dt)
    ux, uy = ad.record("fluid.boundary_conditions", ux, uy, state.pos, state.vel, state.omega, **bc)
    ux, uy, p = ad.record("fluid.project", ux, uy, flags=flags, grid=g, rho=fp.rho, dt=dt,
                          tol=fp.poisson_tol, max_iter=fp.poisson_max_iter)

    f_fluid, t_fluid = ad.record("rigid_body.fluid_force_torque", p, state.pos, state.alpha,
                                 flags=flags, grid=g, local=samples.local,
                                 local_normals=samples.local_normals, ds=samples.ds)
    f_ext, t_ext = external_forcing(cfg.forcing_schedule if forcing is None else forcing, state.t)
    f_total = ad.add(ad.add(f_fluid, force_c), f_ext)
    t_total = ad.add(ad.add(t_fluid, torque_c), t_ext)
    pos, alpha, vel, omega = ad.record("rigid_body.integrate", state.pos, state.alpha, state.vel,
                                       state.omega, f_total, t_total, m=cfg.props.m,
                                       I=cfg.props.I, dt=dt, dof=cfg.dof)
    if not isinstance(force_c, Tensor):
        force_c = Tensor(force_c)
    if not isinstance(torque_c, Tensor):
        torque_c = Tensor(torque_c)
    return SimState(
        ux=ux, uy=uy, pressure=p, marker=marker, pos=pos, alpha=alpha, vel=vel, omega=omega,
        flags=flags, t=(state.step_index + 1) * dt, step_index=state.step_index + 1,
        last_force=force_c, last_torque=torque_c,
        fluid_force=f_fluid.value.copy(), fluid_torque=float(t_fluid.value), seed=state.seed,
    )


def sample_objective(rng: np.random.Generator, dof: int, low: float = 25.0, high: float = 75.0):
    """Uniform training target: position in ``[low, high]^2``, angle in [-pi/2, pi/2] for 3 DOF."""
    x = rng.uniform(low, high, size=2)
    alpha = rng.uniform(-np.pi / 2, np.pi / 2) if dof == 3 else 0.0
    return (float(x[0]), float(x[1])), float(alpha)
