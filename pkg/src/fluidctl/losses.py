"""Objective, velocity and effort loss terms over an l-step window."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ABLATIONS = ("OVE", "OV", "OE", "O")
_V_KEYS = ("beta_xdot", "beta_alphadot")
_E_KEYS = ("beta_F", "beta_T", "beta_dF", "beta_dT")


@dataclass(frozen=True)
class LossWeights:
    beta_xy: float = 15.0
    beta_alpha: float = 0.0
    beta_xdot: float = 5.0
    beta_alphadot: float = 0.0
    beta_prox: float = 0.1
    beta_F: float = 0.1
    beta_T: float = 0.0
    beta_dF: float = 2.0
    beta_dT: float = 0.0
    l: int = 16

    def __post_init__(self):
        if self.l < 1:
            raise ValueError("horizon l must be >= 1")
        for f in fields(self):
            if f.name != "l" and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")

    @classmethod
    def defaults(cls, dof: int) -> LossWeights:
        if dof == 2:
            return cls()
        # beta_T is not listed for 3 DOF; torque magnitude is only shaped through beta_dT
        return cls(beta_xy=5.0, beta_alpha=30.0, beta_xdot=5.0, beta_alphadot=0.05,
                   beta_prox=0.1, beta_F=0.1, beta_T=0.0, beta_dF=1.0, beta_dT=1.0)


def apply_ablation(w: LossWeights, token: str) -> LossWeights:
    """Zero the beta groups not named in ``token`` (one of OVE, OV, OE, O)."""
    if token not in ABLATIONS:
        raise ValueError(f"invalid ablation {token!r}; expected one of {', '.join(ABLATIONS)}")
    patch = {}
    if "V" not in token:
        patch.update(dict.fromkeys(_V_KEYS, 0.0))
    if "E" not in token:
        patch.update(dict.fromkeys(_E_KEYS, 0.0))
    return replace(w, **patch)


@dataclass
class WindowTrace:
    """Per-step quantities of one window; entries may be tensors or arrays.

    ``F_prev``/``T_prev`` are the efforts applied just before the window.
    """

    e_xy: list = field(default_factory=list)
    e_alpha: list = field(default_factory=list)
    xdot: list = field(default_factory=list)
    alphadot: list = field(default_factory=list)
    F_c: list = field(default_factory=list)
    T_c: list = field(default_factory=list)
    F_prev: object = field(default_factory=lambda: np.zeros(2))
    T_prev: object = 0.0

    def __len__(self) -> int:
        return len(self.e_xy)

    def append(self, e_xy, e_alpha, xdot, alphadot, F_c, T_c) -> None:
        self.e_xy.append(e_xy)
        self.e_alpha.append(e_alpha)
        self.xdot.append(xdot)
        self.alphadot.append(alphadot)
        self.F_c.append(F_c)
        self.T_c.append(T_c)


def _sq(x):
    return ad.sum(ad.square(x))


def _check(trace: WindowTrace, w: LossWeights) -> int:
    n = len(trace)
    lists = (trace.e_alpha, trace.xdot, trace.alphadot, trace.F_c, trace.T_c)
    if n != w.l or any(len(x) != n for x in lists):
        raise ValueError(f"window trace has {n} steps, expected l={w.l}")
    return n


def _accumulate(terms) -> Tensor:
    total = Tensor(0.0)
    for t in terms:
        total = ad.add(total, t)
    return total


def objective_term(trace: WindowTrace, w: LossWeights) -> Tensor:
    l = _check(trace, w)
    terms = []
    for n in range(l):
        terms.append(ad.mul(_sq(trace.e_xy[n]), w.beta_xy / l))
        if w.beta_alpha:
            terms.append(ad.mul(_sq(ad.wrap_angle(trace.e_alpha[n])), w.beta_alpha / l))
    return _accumulate(terms)


def velocity_term(trace: WindowTrace, w: LossWeights) -> Tensor:
    l = _check(trace, w)
    terms = []
    for n in range(l):
        gate = ad.add(ad.mul(_sq(trace.e_xy[n]), w.beta_prox), 1.0)
        terms.append(ad.mul(ad.div(_sq(trace.xdot[n]), gate), w.beta_xdot / l))
        if w.beta_alphadot:
            gate_a = ad.add(ad.mul(_sq(ad.wrap_angle(trace.e_alpha[n])), w.beta_prox), 1.0)
            terms.append(ad.mul(ad.div(_sq(trace.alphadot[n]), gate_a), w.beta_alphadot / l))
    return _accumulate(terms)


def effort_term(trace: WindowTrace, w: LossWeights) -> Tensor:
    l = _check(trace, w)
    terms = []
    prev_f, prev_t = trace.F_prev, trace.T_prev
    for n in range(l):
        f, t = trace.F_c[n], trace.T_c[n]
        terms.append(ad.mul(_sq(f), w.beta_F / l))
        terms.append(ad.mul(_sq(ad.sub(f, prev_f)), w.beta_dF / l))
        if w.beta_T:
            terms.append(ad.mul(_sq(t), w.beta_T / l))
        if w.beta_dT:
            terms.append(ad.mul(_sq(ad.sub(t, prev_t)), w.beta_dT / l))
        prev_f, prev_t = f, t
    return _accumulate(terms)


@dataclass(frozen=True)
class LossBreakdown:
    total: Tensor
    O: float
    V: float
    E: float


def total_loss(trace: WindowTrace, w: LossWeights) -> Tensor:
    return breakdown(trace, w).total


def breakdown(trace: WindowTrace, w: LossWeights) -> LossBreakdown:
    o = objective_term(trace, w)
    v = velocity_term(trace, w)
    e = effort_term(trace, w)
    return LossBreakdown(ad.add(ad.add(o, v), e), float(o.value), float(v.value), float(e.value))


def reward(trace: WindowTrace, w: LossWeights) -> float:
    return -float(total_loss(trace, w).value)
