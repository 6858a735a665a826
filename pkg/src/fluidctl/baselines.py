"""PID and loop-shaping controllers acting on body-frame errors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rigid_body import rotation, wrap

SAMPLE_INTERVAL = 0.1


@dataclass(frozen=True)
class PIDGains:
    P: float
    D: float
    I: float


PID_CYLINDER_FORCE = PIDGains(1.0, 8.0, 0.001)
PID_BOX_FORCE = PIDGains(2.0, 15.0, 0.001)
PID_BOX_TORQUE = PIDGains(100.0, 1000.0, 0.01)


@dataclass(frozen=True)
class LoopShapingCoeffs:
    n: tuple[float, float, float] = (1.1700924033918623, -1.4694211940919182, 0.30598060140064326)
    d: tuple[float, float] = (-1.2306775904257603, 0.26726488821832250)


LOOPSHAPING = LoopShapingCoeffs()
# synthesis provenance only; the coefficients above are what runs
LOOPSHAPING_SYNTHESIS = {"robustness_alpha": 0.95, "bandwidth": 0.2}


@dataclass
class ControllerMemory:
    """Per-channel history, zero at episode start."""

    e1: float = 0.0
    e2: float = 0.0
    e_sum: float = 0.0
    u1: float = 0.0
    u2: float = 0.0


def pid_step(gains: PIDGains, e_t: float, mem: ControllerMemory) -> tuple[float, ControllerMemory]:
    e_sum = mem.e_sum + e_t
    u = gains.P * e_t + gains.D * (e_t - mem.e1) / SAMPLE_INTERVAL + SAMPLE_INTERVAL * e_sum * gains.I
    return u, ControllerMemory(e_t, mem.e1, e_sum, u, mem.u1)


def loopshaping_step(coeffs: LoopShapingCoeffs, e_t: float,
                     mem: ControllerMemory) -> tuple[float, ControllerMemory]:
    n0, n1, n2 = coeffs.n
    d1, d2 = coeffs.d
    u = n0 * e_t + n1 * mem.e1 + n2 * mem.e2 - d1 * mem.u1 - d2 * mem.u2
    return u, ControllerMemory(e_t, mem.e1, mem.e_sum + e_t, u, mem.u1)


def body_frame_errors(state, objective, dof: int) -> np.ndarray:
    x_obj, alpha_obj = objective
    alpha = float(state.alpha.value)
    e_xy = rotation(-alpha) @ (np.asarray(x_obj, float) - state.pos.value)
    if dof == 2:
        return e_xy
    return np.append(e_xy, wrap(float(alpha_obj) - alpha))


@dataclass
class ClassicController:
    """Per-channel baseline run on body-frame errors; efforts are unbounded.

    With ``seed_derivative`` the previous error is seeded with the current
    one at each (re)start, so an objective change does not produce a
    derivative kick of ``D * e / 0.1``.
    """

    name: str
    kind: str
    dof: int
    gains: tuple[PIDGains, ...] = ()
    coeffs: LoopShapingCoeffs = LOOPSHAPING
    seed_derivative: bool = True
    bounded: bool = False
    memory: list[ControllerMemory] = field(default_factory=list)
    _fresh: bool = True

    def reset(self) -> None:
        self.memory = [ControllerMemory() for _ in range(self.dof)]
        self._fresh = True

    def on_new_objective(self) -> None:
        self.reset()

    def __call__(self, state, objective):
        if not self.memory:
            self.reset()
        errors = body_frame_errors(state, objective, self.dof)
        if self._fresh and self.seed_derivative and self.kind == "pid":
            self.memory = [ControllerMemory(e1=float(e)) for e in errors]
        self._fresh = False
        out = np.zeros(self.dof)
        for k, e in enumerate(errors):
            if self.kind == "pid":
                out[k], self.memory[k] = pid_step(self.gains[k], float(e), self.memory[k])
            else:
                out[k], self.memory[k] = loopshaping_step(self.coeffs, float(e), self.memory[k])
        force = rotation(float(state.alpha.value)) @ out[:2]
        torque = float(out[2]) if self.dof == 3 else 0.0
        return force, torque


def pid_gains_for(cfg) -> tuple[PIDGains, ...]:
    if cfg.shape.kind == "cylinder":
        return (PID_CYLINDER_FORCE,) * cfg.dof
    return (PID_BOX_FORCE, PID_BOX_FORCE, PID_BOX_TORQUE)[: cfg.dof]


def make_baseline(kind: str, cfg, gains: tuple[PIDGains, ...] | None = None,
                  coeffs: LoopShapingCoeffs | None = None) -> ClassicController:
    if kind == "pid":
        c = ClassicController("PID", "pid", cfg.dof, gains=gains or pid_gains_for(cfg))
    elif kind in ("loopshaping", "ls"):
        if cfg.dof != 2:
            raise ValueError("loop-shaping controller is only available for 2-DOF environments")
        c = ClassicController("LS", "loopshaping", 2, coeffs=coeffs or LOOPSHAPING)
    else:
        raise ValueError(f"unknown baseline {kind!r}; expected pid or loopshaping")
    c.reset()
    return c
