"""Rigid bodies immersed in the grid: geometry, rasterization, pressure loads, motion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.ndimage as ndi

from .autodiff import CustomAdjoint, register_adjoint
from .fluid import CellType, Grid, boundary_flags


class BodyOutOfDomain(RuntimeError):
    """The body overlaps the boundary ring or leaves the domain."""


def wrap(angle):
    """Wrap to (-pi, pi]; values already in range are returned unchanged."""
    a = np.asarray(angle, float)
    return np.where((a > -np.pi) & (a <= np.pi), a, np.pi - np.mod(np.pi - a, 2.0 * np.pi))


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class BodyShape:
    kind: str
    radius: float = 0.0
    width: float = 0.0
    height: float = 0.0

    @classmethod
    def cylinder(cls, radius: float) -> BodyShape:
        return cls("cylinder", radius=radius)

    @classmethod
    def box(cls, width: float, height: float) -> BodyShape:
        return cls("box", width=width, height=height)

    def __post_init__(self):
        if self.kind == "cylinder":
            if self.radius <= 0:
                raise ValueError("cylinder radius must be positive")
        elif self.kind == "box":
            if self.width <= 0 or self.height <= 0:
                raise ValueError("box width and height must be positive")
        else:
            raise ValueError(f"unknown body kind {self.kind!r}")

    @property
    def area(self) -> float:
        if self.kind == "cylinder":
            return math.pi * self.radius**2
        return self.width * self.height

    @property
    def perimeter(self) -> float:
        if self.kind == "cylinder":
            return 2.0 * math.pi * self.radius
        return 2.0 * (self.width + self.height)

    @property
    def bounding_radius(self) -> float:
        if self.kind == "cylinder":
            return self.radius
        return 0.5 * math.hypot(self.width, self.height)

    def sdf_local(self, px, py):
        """Signed distance in the body frame (negative inside)."""
        if self.kind == "cylinder":
            return np.hypot(px, py) - self.radius
        qx = np.abs(px) - 0.5 * self.width
        qy = np.abs(py) - 0.5 * self.height
        outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
        inside = np.minimum(np.maximum(qx, qy), 0.0)
        return outside + inside

    def contour(self, spacing: float):
        """Body-frame contour samples: positions (S, 2), normals (S, 2), arc weights (S,)."""
        if self.kind == "cylinder":
            n = max(8, math.ceil(self.perimeter / spacing))
            th = 2.0 * np.pi * (np.arange(n) + 0.5) / n
            normals = np.stack([np.cos(th), np.sin(th)], axis=1)
            return self.radius * normals, normals, np.full(n, self.perimeter / n)
        hw, hh = 0.5 * self.width, 0.5 * self.height
        edges = [  # start corner, direction, outward normal, length
            ((-hw, -hh), (1.0, 0.0), (0.0, -1.0), self.width),
            ((hw, -hh), (0.0, 1.0), (1.0, 0.0), self.height),
            ((hw, hh), (-1.0, 0.0), (0.0, 1.0), self.width),
            ((-hw, hh), (0.0, -1.0), (-1.0, 0.0), self.height),
        ]
        pos, nrm, ds = [], [], []
        for start, d, nvec, length in edges:
            n = max(1, math.ceil(length / spacing))
            t = (np.arange(n) + 0.5) * (length / n)
            pos.append(np.array(start) + t[:, None] * np.array(d))
            nrm.append(np.tile(nvec, (n, 1)))
            ds.append(np.full(n, length / n))
        return np.concatenate(pos), np.concatenate(nrm), np.concatenate(ds)


@dataclass(frozen=True)
class BodyProperties:
    m: float
    I: float

    def __post_init__(self):
        if self.m <= 0 or self.I <= 0:
            raise ValueError("mass and inertia must be positive")


@dataclass
class BodyState:
    x_r: np.ndarray
    alpha: float = 0.0
    v: np.ndarray = field(default_factory=lambda: np.zeros(2))
    omega: float = 0.0

    def __post_init__(self):
        self.x_r = np.asarray(self.x_r, dtype=float).reshape(2)
        self.v = np.asarray(self.v, dtype=float).reshape(2)
        self.alpha = float(wrap(self.alpha))
        self.omega = float(self.omega)


@dataclass(frozen=True)
class SurfaceSamples:
    """Contour quadrature in the body frame plus the world pose it was placed at."""

    local: np.ndarray
    local_normals: np.ndarray
    ds: np.ndarray
    x_r: np.ndarray
    alpha: float

    @property
    def r(self) -> np.ndarray:
        return self.local @ rotation(self.alpha).T

    @property
    def positions(self) -> np.ndarray:
        return self.x_r + self.r

    @property
    def normals(self) -> np.ndarray:
        return self.local_normals @ rotation(self.alpha).T

    @property
    def cross(self) -> np.ndarray:
        """Scalar ``r x n``; rotation invariant, so computed in the body frame."""
        return self.local[:, 0] * self.local_normals[:, 1] - self.local[:, 1] * self.local_normals[:, 0]


def sdf(shape: BodyShape, state: BodyState, point) -> np.ndarray:
    """Signed distance from world point(s) to the posed body."""
    p = np.asarray(point, dtype=float)
    d = p - state.x_r
    c, s = math.cos(state.alpha), math.sin(state.alpha)
    lx = c * d[..., 0] + s * d[..., 1]
    ly = -s * d[..., 0] + c * d[..., 1]
    return shape.sdf_local(lx, ly)


def obstacle_mask(shape: BodyShape, x_r, alpha: float, grid: Grid) -> np.ndarray:
    X, Y = grid.cell_centers()
    state = BodyState(x_r, alpha)
    return sdf(shape, state, np.stack([X, Y], axis=-1)) <= 0.0


def rasterize(shape: BodyShape, state: BodyState, grid: Grid, base_flags: np.ndarray | None = None):
    """Flag cells with ``sdf <= 0`` as OBSTACLE and sample the contour at spacing <= dx/2.

    Raises :class:`BodyOutOfDomain` if the body touches the boundary ring.
    """
    if base_flags is None:
        base_flags = boundary_flags(grid)
    if _touches_ring(shape, state, grid):
        x, y = state.x_r
        raise BodyOutOfDomain(f"body at ({x:.3f}, {y:.3f}) intersects the domain boundary")
    mask = obstacle_mask(shape, state.x_r, state.alpha, grid)
    flags = np.array(base_flags, dtype=np.int8, copy=True)
    flags[mask] = CellType.OBSTACLE
    local, normals, ds = shape.contour(0.5 * grid.dx)
    return flags, SurfaceSamples(local, normals, ds, state.x_r.copy(), state.alpha)


def _touches_ring(shape, state, grid) -> bool:
    """Whether any part of the contour lies within the outer ring of cells."""
    local, _, _ = shape.contour(0.25 * grid.dx)
    pts = state.x_r + local @ rotation(state.alpha).T
    lo, hi_x, hi_y = grid.dx, grid.width - grid.dx, grid.height - grid.dx
    return bool(np.any((pts[:, 0] <= lo) | (pts[:, 0] >= hi_x) | (pts[:, 1] <= lo) | (pts[:, 1] >= hi_y)))


# --------------------------------------------------------------------------
# pressure load

_STENCIL = 4  # cells per axis of the local fit


def _surface_pressure_weights(P: np.ndarray, flags: np.ndarray, grid: Grid):
    """Linear weights mapping fluid-cell pressures to values at points ``P``.

    Each point gets a least-squares plane through the FLUID cells of the
    surrounding 4x4 block, evaluated at the point: exact for linear fields
    and one-sided across the obstacle. Returns cell indices (S, K), weights
    (S, K) and the position-gradient weights (S, K, 2).
    """
    ny, nx = flags.shape
    dx = grid.dx
    fx = P[:, 0] / dx - 0.5
    fy = P[:, 1] / dx - 0.5
    i0 = np.clip(np.floor(fx).astype(np.intp) - 1, 0, nx - _STENCIL)
    j0 = np.clip(np.floor(fy).astype(np.intp) - 1, 0, ny - _STENCIL)
    off = np.arange(_STENCIL)
    ii = (i0[:, None, None] + off[None, None, :]).repeat(_STENCIL, axis=1).reshape(len(P), -1)
    jj = (j0[:, None, None] + off[None, :, None]).repeat(_STENCIL, axis=2).reshape(len(P), -1)
    fluid = (flags[jj, ii] == CellType.FLUID).astype(float)
    cx = (ii + 0.5) * dx
    cy = (jj + 0.5) * dx
    cnt = fluid.sum(axis=1)
    safe = np.maximum(cnt, 1.0)
    mx = (fluid * cx).sum(axis=1) / safe
    my = (fluid * cy).sum(axis=1) / safe
    dxk = (cx - mx[:, None]) * fluid
    dyk = (cy - my[:, None]) * fluid
    sxx = (dxk * dxk).sum(axis=1)
    sxy = (dxk * dyk).sum(axis=1)
    syy = (dyk * dyk).sum(axis=1)
    det = sxx * syy - sxy * sxy
    good = (cnt >= 3) & (det > 1e-9 * dx**4 * np.maximum(cnt, 1.0) ** 2)
    inv_det = np.where(good, 1.0 / np.where(good, det, 1.0), 0.0)
    # gradient weights: M^{-1} (x_k - mean)
    gwx = (syy[:, None] * dxk - sxy[:, None] * dyk) * inv_det[:, None]
    gwy = (-sxy[:, None] * dxk + sxx[:, None] * dyk) * inv_det[:, None]
    rx = P[:, 0] - mx
    ry = P[:, 1] - my
    w = fluid / safe[:, None] + rx[:, None] * gwx + ry[:, None] * gwy
    gw = np.stack([gwx, gwy], axis=-1)

    empty = cnt == 0
    if empty.any():
        # no fluid nearby: constant extrapolation from the nearest FLUID cell
        _, (nj, ni) = ndi.distance_transform_edt(flags != CellType.FLUID, return_indices=True)
        cj = np.clip((P[empty, 1] / dx).astype(np.intp), 0, ny - 1)
        ci = np.clip((P[empty, 0] / dx).astype(np.intp), 0, nx - 1)
        jj[empty, 0] = nj[cj, ci]
        ii[empty, 0] = ni[cj, ci]
        w[empty] = 0.0
        w[empty, 0] = 1.0
        gw[empty] = 0.0
    return jj * nx + ii, w, gw


def _force_fwd(p, pos, alpha, flags, grid: Grid, local, local_normals, ds):
    R = rotation(float(alpha))
    r = local @ R.T
    P = pos + r
    n = local_normals @ R.T
    idx, w, gw = _surface_pressure_weights(P, flags, grid)
    pflat = p.ravel()
    ps = (w * pflat[idx]).sum(axis=1)
    cross = local[:, 0] * local_normals[:, 1] - local[:, 1] * local_normals[:, 0]
    F = -(ps * ds) @ n
    T = np.asarray(-(ps * ds * cross).sum())
    saved = (p.shape, pflat, idx, w, gw, ps, ds, n, r, cross)
    return (F, T), saved


def _force_bwd(saved, gouts):
    shape, pflat, idx, w, gw, ps, ds, n, r, cross = saved
    gF, gT = gouts
    h = -ds * (n @ gF) - float(gT) * ds * cross  # dL/d(ps)
    gp = np.bincount(idx.ravel(), (h[:, None] * w).ravel(), minlength=pflat.size).reshape(shape)
    dps_dP = np.einsum("sk,skd->sd", pflat[idx], gw)
    gP = h[:, None] * dps_dP
    gpos = gP.sum(axis=0)
    # positions and normals rotate with alpha: d(Rv)/dalpha = perp(Rv)
    perp_r = np.stack([-r[:, 1], r[:, 0]], axis=1)
    perp_n = np.stack([-n[:, 1], n[:, 0]], axis=1)
    galpha = (gP * perp_r).sum() - ((ps * ds)[:, None] * perp_n).sum(axis=0) @ gF
    return gp, gpos, np.asarray(galpha)


register_adjoint(CustomAdjoint("rigid_body.fluid_force_torque", _force_fwd, _force_bwd))


def fluid_force_torque(pressure, samples: SurfaceSamples, flags, grid: Grid):
    """Pressure load ``F = -sum p n ds`` and ``T = -sum (r x n) p ds`` on the contour."""
    (F, T), _ = _force_fwd(np.asarray(pressure, float), samples.x_r, samples.alpha,
                           np.asarray(flags), grid, samples.local, samples.local_normals, samples.ds)
    return F, float(T)


# --------------------------------------------------------------------------
# motion

def _integrate_fwd(pos, alpha, vel, omega, force, torque, m: float, I: float, dt: float, dof: int):
    v_new = vel + dt * force / m
    x_new = pos + dt * v_new
    if dof == 3:
        w_new = omega + dt * torque / I
        a_new = wrap(alpha + dt * w_new)
    else:
        w_new = np.array(omega, dtype=float)
        a_new = np.array(alpha, dtype=float)
    return (x_new, np.asarray(a_new), v_new, np.asarray(w_new)), (m, I, dt, dof)


def _integrate_bwd(saved, gouts):
    m, I, dt, dof = saved
    gx, ga, gv, gw = gouts
    gv_new = gv + dt * gx
    gpos = gx
    gvel = gv_new
    gforce = dt * gv_new / m
    if dof == 3:
        gw_new = gw + dt * ga
        return gpos, ga, gvel, gw_new, gforce, np.asarray(dt * gw_new / I)
    return gpos, ga, gvel, gw, gforce, np.zeros(())


register_adjoint(CustomAdjoint("rigid_body.integrate", _integrate_fwd, _integrate_bwd))


def integrate_motion(state: BodyState, props: BodyProperties, F_total, T_total: float,
                     dt: float, dof: int = 3) -> BodyState:
    """Semi-implicit Euler: velocities first, then positions from the new velocities.

    With ``dof=2`` the angle and angular velocity are frozen.
    """
    if dof not in (2, 3):
        raise ValueError("dof must be 2 or 3")
    (x, a, v, w), _ = _integrate_fwd(state.x_r, state.alpha, state.v, state.omega,
                                     np.asarray(F_total, float), float(T_total),
                                     props.m, props.I, dt, dof)
    return replace(state, x_r=x, alpha=float(a), v=v, omega=float(w))
