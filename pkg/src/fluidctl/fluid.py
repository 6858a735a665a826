"""Incompressible flow on a 2D staggered (MAC) grid.

Layout: ``ux`` lives on x-faces with shape ``(ny, nx + 1)`` at
``(i * dx, (j + 0.5) * dx)``; ``uy`` lives on y-faces with shape
``(ny + 1, nx)`` at ``((i + 0.5) * dx, j * dx)``; scalars live at cell
centres ``((i + 0.5) * dx, (j + 0.5) * dx)`` with shape ``(ny, nx)``.
Row index ``j`` grows with ``y``.

Every operator is a pure function on numpy arrays. The differentiable
variants (``fluid.advect_scalar``, ``fluid.project``, ...) are registered
as custom adjoints and reached through :func:`fluidctl.autodiff.record`.
"""

from __future__ import annotations

import enum
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp

from .autodiff import CustomAdjoint, register_adjoint


class CellType(enum.IntEnum):
    FLUID = 0
    OBSTACLE = 1
    INFLOW = 2
    OUTFLOW = 3
    WALL = 4


# face classes, ordered by precedence when a face touches several cell types
FACE_FREE = 0
FACE_OBSTACLE = 1
FACE_WALL = 2
FACE_INFLOW = 3
FACE_OUTFLOW = 4


class PoissonWarning(RuntimeWarning):
    """Pressure solve stopped at ``max_iter`` above the requested tolerance."""


class StabilityWarning(RuntimeWarning):
    """A time step exceeds an explicit stability bound (CFL or diffusion)."""


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    dx: float

    @classmethod
    def square(cls, n: int, length: float = 100.0) -> Grid:
        return cls(n, n, length / n)

    @property
    def width(self) -> float:
        return self.nx * self.dx

    @property
    def height(self) -> float:
        return self.ny * self.dx

    def cell_centers(self):
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dx
        return np.meshgrid(x, y)

    def xface_positions(self):
        x = np.arange(self.nx + 1) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dx
        return np.meshgrid(x, y)

    def yface_positions(self):
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = np.arange(self.ny + 1) * self.dx
        return np.meshgrid(x, y)

    # sample origins: world position of array element [0, 0]
    @property
    def center_origin(self):
        return (0.5 * self.dx, 0.5 * self.dx)

    @property
    def xface_origin(self):
        return (0.0, 0.5 * self.dx)

    @property
    def yface_origin(self):
        return (0.5 * self.dx, 0.0)

    def zeros_velocity(self):
        return np.zeros((self.ny, self.nx + 1)), np.zeros((self.ny + 1, self.nx))


@dataclass(frozen=True)
class FluidParams:
    """Physical and numerical fluid settings.

    ``nu`` is derived as ``u_ref * L_ref / Re``.
    """

    Re: float = 1000.0
    rho: float = 0.05
    u_ref: float = 1.0
    L_ref: float = 10.0
    dt: float = 0.1
    buoyancy_coeff: float = 0.5
    inflow_speed: float = 1.0
    poisson_tol: float = 1e-6
    poisson_max_iter: int = 2000

    def __post_init__(self):
        if self.Re <= 0:
            raise ValueError("Re must be positive")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.buoyancy_coeff < 0:
            raise ValueError("buoyancy_coeff must be non-negative")
        if self.poisson_tol <= 0 or self.poisson_max_iter < 1:
            raise ValueError("poisson_tol must be positive and poisson_max_iter >= 1")

    @property
    def nu(self) -> float:
        return self.u_ref * self.L_ref / self.Re


def boundary_flags(grid: Grid, inflow: bool = False) -> np.ndarray:
    """Cell flags for an empty domain: a WALL ring, or inflow left / outflow right."""
    flags = np.full((grid.ny, grid.nx), CellType.FLUID, dtype=np.int8)
    flags[0, :] = CellType.WALL
    flags[-1, :] = CellType.WALL
    if inflow:
        flags[1:-1, 0] = CellType.INFLOW
        flags[1:-1, -1] = CellType.OUTFLOW
    else:
        flags[:, 0] = CellType.WALL
        flags[:, -1] = CellType.WALL
    return flags


def _classify(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Face class from the two adjacent cell types (-1 marks outside the domain)."""
    cls = np.full(a.shape, FACE_FREE, dtype=np.int8)
    both = np.stack([a, b])
    outflow_only = np.all((both == CellType.OUTFLOW) | (both == -1), axis=0)
    cls[outflow_only] = FACE_OUTFLOW
    cls[np.any(both == CellType.INFLOW, axis=0)] = FACE_INFLOW
    cls[np.any(both == CellType.WALL, axis=0)] = FACE_WALL
    cls[np.any(both == CellType.OBSTACLE, axis=0)] = FACE_OBSTACLE
    return cls


def face_classes(flags: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Classify x- and y-faces as free or set by a boundary condition."""
    ny, nx = flags.shape
    f = flags.astype(np.int16)
    padx = np.full((ny, nx + 2), -1, dtype=np.int16)
    padx[:, 1:-1] = f
    cx = _classify(padx[:, :-1], padx[:, 1:])
    pady = np.full((ny + 2, nx), -1, dtype=np.int16)
    pady[1:-1, :] = f
    cy = _classify(pady[:-1, :], pady[1:, :])
    return cx, cy


# --------------------------------------------------------------------------
# bilinear sampling with adjoint

def _sample(q: np.ndarray, origin, dx: float, X: np.ndarray, Y: np.ndarray):
    """Bilinear interpolation of grid array ``q`` at world points (clamped)."""
    ny, nx = q.shape
    fx = (X - origin[0]) / dx
    fy = (Y - origin[1]) / dx
    inx = (fx > 0.0) & (fx < nx - 1)
    iny = (fy > 0.0) & (fy < ny - 1)
    fx = np.clip(fx, 0.0, nx - 1)
    fy = np.clip(fy, 0.0, ny - 1)
    i0 = np.minimum(np.floor(fx).astype(np.intp), nx - 2)
    j0 = np.minimum(np.floor(fy).astype(np.intp), ny - 2)
    tx = fx - i0
    ty = fy - j0
    q00 = q[j0, i0]
    q10 = q[j0, i0 + 1]
    q01 = q[j0 + 1, i0]
    q11 = q[j0 + 1, i0 + 1]
    val = (q00 * (1 - tx) + q10 * tx) * (1 - ty) + (q01 * (1 - tx) + q11 * tx) * ty
    ctx = (q.shape, i0, j0, tx, ty, inx, iny, dx)
    return val, ctx


def _stencil_values(q, ctx):
    _, i0, j0, *_ = ctx
    return q[j0, i0], q[j0, i0 + 1], q[j0 + 1, i0], q[j0 + 1, i0 + 1]


def _sample_vjp(q, ctx, g, want_pos: bool = True):
    """Cotangents of a bilinear sample w.r.t. the array and the query points."""
    shape, i0, j0, tx, ty, inx, iny, dx = ctx
    ny, nx = shape
    base = (j0 * nx + i0).ravel()
    gf = g.ravel()
    w00 = ((1 - tx) * (1 - ty)).ravel()
    w10 = (tx * (1 - ty)).ravel()
    w01 = ((1 - tx) * ty).ravel()
    w11 = (tx * ty).ravel()
    size = ny * nx
    gq = (np.bincount(base, gf * w00, size)
          + np.bincount(base + 1, gf * w10, size)
          + np.bincount(base + nx, gf * w01, size)
          + np.bincount(base + nx + 1, gf * w11, size)).reshape(shape)
    if not want_pos:
        return gq, None, None
    q00, q10, q01, q11 = _stencil_values(q, ctx)
    dvdx = ((q10 - q00) * (1 - ty) + (q11 - q01) * ty) / dx
    dvdy = ((q01 - q00) * (1 - tx) + (q11 - q10) * tx) / dx
    return gq, g * dvdx * inx, g * dvdy * iny


# --------------------------------------------------------------------------
# advection

def _maccormack_fwd(q, origin, X, Y, ux, uy, grid: Grid, dt: float):
    dx = grid.dx
    vx, cvx = _sample(ux, grid.xface_origin, dx, X, Y)
    vy, cvy = _sample(uy, grid.yface_origin, dx, X, Y)
    Xb, Yb = X - dt * vx, Y - dt * vy
    q1, c1 = _sample(q, origin, dx, Xb, Yb)
    Xf, Yf = X + dt * vx, Y + dt * vy
    q2, c2 = _sample(q1, origin, dx, Xf, Yf)
    qc = q1 + 0.5 * (q - q2)
    corners = np.stack(_stencil_values(q, c1))
    k_lo = np.argmin(corners, axis=0)
    k_hi = np.argmax(corners, axis=0)
    lo = np.take_along_axis(corners, k_lo[None], 0)[0]
    hi = np.take_along_axis(corners, k_hi[None], 0)[0]
    out = np.clip(qc, lo, hi)
    saved = (q, q1, cvx, cvy, c1, c2, qc < lo, qc > hi, k_lo, k_hi, dt, ux, uy)
    return out, saved


_CORNER_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))  # (dj, di) matching _stencil_values


def _maccormack_bwd(saved, g):
    q, q1, cvx, cvy, c1, c2, below, above, k_lo, k_hi, dt, ux, uy = saved
    gq = np.zeros_like(q)
    # limiter: clamped entries take the value of one stencil corner of q
    _, i0, j0, *_ = c1
    for mask, k in ((below, k_lo), (above, k_hi)):
        if mask.any():
            dj = np.array([o[0] for o in _CORNER_OFFSETS])[k[mask]]
            di = np.array([o[1] for o in _CORNER_OFFSETS])[k[mask]]
            np.add.at(gq, (j0[mask] + dj, i0[mask] + di), g[mask])
    gqc = np.where(below | above, 0.0, g)
    gq += 0.5 * gqc
    gq2 = -0.5 * gqc
    gq1_b, gXf, gYf = _sample_vjp(q1, c2, gq2)
    gq1 = gqc + gq1_b
    gq_a, gXb, gYb = _sample_vjp(q, c1, gq1)
    gq += gq_a
    gvx = dt * (gXf - gXb)
    gvy = dt * (gYf - gYb)
    gux, _, _ = _sample_vjp(ux, cvx, gvx, want_pos=False)
    guy, _, _ = _sample_vjp(uy, cvy, gvy, want_pos=False)
    return gq, gux, guy


def _check_cfl(ux, uy, grid: Grid, dt: float):
    umax = max(np.abs(ux).max(initial=0.0), np.abs(uy).max(initial=0.0))
    cfl = umax * dt / grid.dx
    if cfl > 1.0:
        warnings.warn(f"CFL number {cfl:.3g} exceeds 1", StabilityWarning, stacklevel=3)


def _advect_scalar_fwd(q, ux, uy, grid: Grid, dt: float):
    _check_cfl(ux, uy, grid, dt)
    X, Y = grid.cell_centers()
    return _maccormack_fwd(q, grid.center_origin, X, Y, ux, uy, grid, dt)


def _advect_scalar_bwd(saved, gouts):
    return _maccormack_bwd(saved, gouts[0])


def _advect_velocity_fwd(ux, uy, grid: Grid, dt: float):
    _check_cfl(ux, uy, grid, dt)
    Xx, Yx = grid.xface_positions()
    Xy, Yy = grid.yface_positions()
    ox, sx = _maccormack_fwd(ux, grid.xface_origin, Xx, Yx, ux, uy, grid, dt)
    oy, sy = _maccormack_fwd(uy, grid.yface_origin, Xy, Yy, ux, uy, grid, dt)
    return (ox, oy), (sx, sy)


def _advect_velocity_bwd(saved, gouts):
    sx, sy = saved
    gx, gy = gouts
    gq_x, gux_a, guy_a = _maccormack_bwd(sx, gx)
    gq_y, gux_b, guy_b = _maccormack_bwd(sy, gy)
    return gq_x + gux_a + gux_b, gq_y + guy_a + guy_b


def advect_scalar(q, ux, uy, grid: Grid, dt: float) -> np.ndarray:
    """MacCormack transport of a cell-centred scalar with a min/max limiter."""
    return _advect_scalar_fwd(np.asarray(q, float), ux, uy, grid, dt)[0]


def advect_velocity(ux, uy, grid: Grid, dt: float):
    """Self-advection of the staggered velocity (both components use the old field)."""
    return _advect_velocity_fwd(np.asarray(ux, float), np.asarray(uy, float), grid, dt)[0]


# --------------------------------------------------------------------------
# diffusion and buoyancy

def _lap_interior(u):
    return u[2:, 1:-1] + u[:-2, 1:-1] + u[1:-1, 2:] + u[1:-1, :-2] - 4.0 * u[1:-1, 1:-1]


def _lap_interior_T(h, shape):
    g = np.zeros(shape)
    g[2:, 1:-1] += h
    g[:-2, 1:-1] += h
    g[1:-1, 2:] += h
    g[1:-1, :-2] += h
    g[1:-1, 1:-1] -= 4.0 * h
    return g


def _diffuse_fwd(ux, uy, grid: Grid, nu: float, dt: float, free_x, free_y):
    if nu < 0:
        raise ValueError("viscosity must be non-negative")
    k = nu * dt / grid.dx**2
    if k > 0.25:
        warnings.warn(f"explicit diffusion number {k:.3g} exceeds 0.25", StabilityWarning, stacklevel=3)
    mx = free_x[1:-1, 1:-1] * k
    my = free_y[1:-1, 1:-1] * k
    ox = ux.copy()
    oy = uy.copy()
    ox[1:-1, 1:-1] += mx * _lap_interior(ux)
    oy[1:-1, 1:-1] += my * _lap_interior(uy)
    return (ox, oy), (mx, my, ux.shape, uy.shape)


def _diffuse_bwd(saved, gouts):
    mx, my, sx, sy = saved
    gx, gy = gouts
    return (gx + _lap_interior_T(mx * gx[1:-1, 1:-1], sx),
            gy + _lap_interior_T(my * gy[1:-1, 1:-1], sy))


def diffuse(ux, uy, grid: Grid, nu: float, dt: float, flags: np.ndarray | None = None):
    """Explicit viscous step ``u += dt * nu * lap(u)`` on free faces only."""
    if flags is None:
        flags = np.zeros((grid.ny, grid.nx), dtype=np.int8)
    cx, cy = face_classes(flags)
    return _diffuse_fwd(np.asarray(ux, float), np.asarray(uy, float), grid, nu, dt,
                        cx == FACE_FREE, cy == FACE_FREE)[0]


def _buoyancy_fwd(uy, marker, coeff: float, dt: float):
    out = uy.copy()
    out[1:-1, :] += coeff * dt * 0.5 * (marker[:-1, :] + marker[1:, :])
    return out, (coeff * dt, marker.shape)


def _buoyancy_bwd(saved, gouts):
    s, shape = saved
    (g,) = gouts
    gm = np.zeros(shape)
    h = 0.5 * s * g[1:-1, :]
    gm[:-1, :] += h
    gm[1:, :] += h
    return g, gm


def apply_buoyancy(uy, marker, coeff: float, dt: float) -> np.ndarray:
    """Boussinesq lift: interior y-faces gain ``coeff * dt * marker`` averaged to the face."""
    if coeff < 0:
        raise ValueError("buoyancy coefficient must be non-negative")
    return _buoyancy_fwd(np.asarray(uy, float), np.asarray(marker, float), coeff, dt)[0]


def _marker_source_fwd(marker, source_mask):
    out = np.where(source_mask, 1.0, marker)
    clipped = np.clip(out, 0.0, 1.0)
    keep = (~source_mask) & (out == clipped)
    return clipped, keep


def _marker_source_bwd(keep, gouts):
    return (gouts[0] * keep,)


# --------------------------------------------------------------------------
# boundary conditions

def _bc_fwd(ux, uy, pos, vel, omega, grid: Grid, cls_x, cls_y, inflow_speed: float):
    Xx, Yx = grid.xface_positions()
    Xy, Yy = grid.yface_positions()
    ox = ux.copy()
    oy = uy.copy()
    bx = cls_x == FACE_OBSTACLE
    by = cls_y == FACE_OBSTACLE
    # rigid motion v + omega x r with r measured from the centre of mass
    ox[bx] = vel[0] - omega * (Yx[bx] - pos[1])
    oy[by] = vel[1] + omega * (Xy[by] - pos[0])
    ox[cls_x == FACE_WALL] = 0.0
    oy[cls_y == FACE_WALL] = 0.0
    ox[cls_x == FACE_INFLOW] = inflow_speed
    oy[cls_y == FACE_INFLOW] = 0.0
    # zero-gradient outflow: copy from the face one column to the left
    jx, ix = np.nonzero(cls_x == FACE_OUTFLOW)
    ox[jx, ix] = ox[jx, ix - 1]
    jy, iy = np.nonzero(cls_y == FACE_OUTFLOW)
    oy[jy, iy] = oy[jy, iy - 1]
    saved = (cls_x, cls_y, Yx[bx] - pos[1], Xy[by] - pos[0], omega, (jx, ix), (jy, iy))
    return (ox, oy), saved


def _bc_bwd(saved, gouts):
    cls_x, cls_y, ry, rx, omega, (jx, ix), (jy, iy) = saved
    gx = gouts[0].copy()
    gy = gouts[1].copy()
    # undo the outflow copies in reverse order of application
    np.add.at(gx, (jx, ix - 1), gx[jx, ix])
    gx[jx, ix] = 0.0
    np.add.at(gy, (jy, iy - 1), gy[jy, iy])
    gy[jy, iy] = 0.0
    bx = cls_x == FACE_OBSTACLE
    by = cls_y == FACE_OBSTACLE
    gbx = gx[bx]
    gby = gy[by]
    gvel = np.array([gbx.sum(), gby.sum()])
    gomega = np.asarray(-(gbx * ry).sum() + (gby * rx).sum())
    gpos = np.array([-omega * gby.sum(), omega * gbx.sum()])
    fixed_x = cls_x != FACE_FREE
    fixed_y = cls_y != FACE_FREE
    gx[fixed_x] = 0.0
    gy[fixed_y] = 0.0
    return gx, gy, gpos, gvel, gomega


def apply_boundary_conditions(ux, uy, flags, grid: Grid, body_pos=(0.0, 0.0),
                              body_vel=(0.0, 0.0), body_omega: float = 0.0,
                              inflow_speed: float = 0.0):
    """Impose obstacle, wall, inflow and outflow face values.

    Faces touching an OBSTACLE cell take the rigid-body velocity
    ``v + omega x (face - pos)``; WALL faces are zeroed; INFLOW faces get
    ``(inflow_speed, 0)``; OUTFLOW faces copy their left neighbour.
    """
    cx, cy = face_classes(flags)
    return _bc_fwd(np.asarray(ux, float), np.asarray(uy, float), np.asarray(body_pos, float),
                   np.asarray(body_vel, float), float(body_omega), grid, cx, cy, inflow_speed)[0]


# --------------------------------------------------------------------------
# divergence, pressure, projection

def divergence(ux, uy, dx: float) -> np.ndarray:
    """Cell-centred divergence of a staggered field."""
    ux = np.asarray(ux)
    uy = np.asarray(uy)
    return (ux[:, 1:] - ux[:, :-1] + uy[1:, :] - uy[:-1, :]) / dx


class PoissonSystem:
    """Negative 5-point Laplacian (times dx^2) restricted to FLUID cells.

    Neumann at OBSTACLE/WALL/INFLOW neighbours, homogeneous Dirichlet at
    OUTFLOW neighbours. Connected fluid regions with no Dirichlet neighbour
    are singular; their right-hand sides and solutions are projected to
    zero mean.
    """

    def __init__(self, flags: np.ndarray):
        self.flags = np.array(flags, dtype=np.int8)
        ny, nx = self.flags.shape
        fluid = self.flags == CellType.FLUID
        self.fluid = fluid
        index = -np.ones((ny, nx), dtype=np.intp)
        index[fluid] = np.arange(fluid.sum())
        self.index = index
        n = int(fluid.sum())
        self.n = n
        if n == 0:
            raise ValueError("no FLUID cells: pressure is undefined")

        rows, cols = [], []
        diag = np.zeros(n)
        dirichlet = np.zeros(n, dtype=bool)
        jj, ii = np.nonzero(fluid)
        me = index[jj, ii]
        for dj, di in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            nj, ni = jj + dj, ii + di
            ok = (nj >= 0) & (nj < ny) & (ni >= 0) & (ni < nx)
            nbr = np.full(jj.shape, -1, dtype=np.int16)
            nbr[ok] = self.flags[nj[ok], ni[ok]]
            is_f = nbr == CellType.FLUID
            is_o = nbr == CellType.OUTFLOW
            diag += is_f | is_o
            dirichlet |= is_o
            rows.append(me[is_f])
            cols.append(index[nj[is_f], ni[is_f]])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        off = sp.csr_matrix((-np.ones(rows.size), (rows, cols)), shape=(n, n))
        self.matrix = (off + sp.diags(diag)).tocsr()

        labels, nlab = ndi.label(fluid)
        lab = labels[fluid] - 1
        self._free_groups = []
        for c in range(nlab):
            members = np.nonzero(lab == c)[0]
            if not dirichlet[members].any():
                self._free_groups.append(members)

    def gauge(self, v: np.ndarray) -> np.ndarray:
        if self._free_groups:
            v = v.copy()
            for members in self._free_groups:
                v[members] -= v[members].mean()
        return v

    def solve(self, rhs: np.ndarray, tol: float, max_iter: int):
        """Conjugate gradients on ``matrix @ x = rhs`` (gauge-projected)."""
        b = self.gauge(rhs)
        A = self.matrix
        x = np.zeros(self.n)
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return x, 0, 0.0
        r = b.copy()
        p = r.copy()
        rs = r @ r
        best_x, best_res = x.copy(), 1.0
        it = 0
        for it in range(1, max_iter + 1):
            Ap = A @ p
            alpha = rs / (p @ Ap)
            x += alpha * p
            r -= alpha * Ap
            rs_new = r @ r
            res = np.sqrt(rs_new) / bnorm
            if res < best_res:
                best_res = res
                best_x = x.copy() if res > tol else x
            if res <= tol:
                return self.gauge(x), it, res
            p = r + (rs_new / rs) * p
            rs = rs_new
        warnings.warn(f"pressure solve did not converge: relative residual {best_res:.3e} "
                      f"after {max_iter} iterations", PoissonWarning, stacklevel=3)
        return self.gauge(best_x), it, best_res


_SYSTEM_CACHE: dict[bytes, PoissonSystem] = {}


def poisson_system(flags: np.ndarray) -> PoissonSystem:
    key = np.asarray(flags, dtype=np.int8).tobytes() + bytes(str(np.shape(flags)), "ascii")
    system = _SYSTEM_CACHE.get(key)
    if system is None:
        if len(_SYSTEM_CACHE) > 64:
            _SYSTEM_CACHE.clear()
        system = PoissonSystem(flags)
        _SYSTEM_CACHE[key] = system
    return system


@dataclass
class SolveInfo:
    iterations: int
    residual: float


def pressure_solve(div, flags, dx: float, tol: float = 1e-6, max_iter: int = 2000):
    """Solve ``lap(p) = div`` on FLUID cells; returns ``(p, SolveInfo)``.

    ``p`` is zero outside FLUID cells. Without Dirichlet (OUTFLOW) cells the
    zero-mean gauge is used.
    """
    system = poisson_system(flags)
    rhs = -(dx * dx) * np.asarray(div, float)[system.fluid]
    x, it, res = system.solve(rhs, tol, max_iter)
    p = np.zeros(system.flags.shape)
    p[system.fluid] = x
    return p, SolveInfo(it, res)


def _grad_faces(p_ext: np.ndarray, dx: float):
    """Pressure gradient on interior faces from an extended cell array."""
    gx = np.zeros((p_ext.shape[0], p_ext.shape[1] + 1))
    gy = np.zeros((p_ext.shape[0] + 1, p_ext.shape[1]))
    gx[:, 1:-1] = (p_ext[:, 1:] - p_ext[:, :-1]) / dx
    gy[1:-1, :] = (p_ext[1:, :] - p_ext[:-1, :]) / dx
    return gx, gy


def _grad_faces_T(gx: np.ndarray, gy: np.ndarray, dx: float):
    h = np.zeros((gx.shape[0], gx.shape[1] - 1))
    inner = gx[:, 1:-1] / dx
    h[:, 1:] += inner
    h[:, :-1] -= inner
    inner = gy[1:-1, :] / dx
    h[1:, :] += inner
    h[:-1, :] -= inner
    return h


def _project_fwd(ux, uy, flags, grid: Grid, rho: float, dt: float, tol: float, max_iter: int):
    system = poisson_system(flags)
    cx, cy = face_classes(flags)
    free_x = cx == FACE_FREE
    free_y = cy == FACE_FREE
    dx = grid.dx
    div = divergence(ux, uy, dx)
    scale = rho / dt
    rhs = -(dx * dx) * scale * div[system.fluid]
    x, it, res = system.solve(rhs, tol, max_iter)
    p = np.zeros(flags.shape)
    p[system.fluid] = x
    gx, gy = _grad_faces(p, dx)
    ox = ux - (dt / rho) * gx * free_x
    oy = uy - (dt / rho) * gy * free_y
    saved = (system, free_x, free_y, dx, scale, dt / rho, tol, max_iter)
    return (ox, oy, p), saved


def _project_bwd(saved, gouts):
    system, free_x, free_y, dx, scale, k, tol, max_iter = saved
    gox, goy, gp = gouts
    # p = S^{-1} (-dx^2 * scale * div(u)); velocity picks up -k * grad(p)
    gp_total = gp - k * _grad_faces_T(gox * free_x, goy * free_y, dx)
    lam, _, _ = system.solve(gp_total[system.fluid], tol, max_iter)
    gdiv = np.zeros(system.flags.shape)
    gdiv[system.fluid] = -(dx * dx) * scale * lam
    # divergence adjoint: d/d ux[:, i] of (ux[:, i+1] - ux[:, i]) / dx
    gux = gox.copy()
    guy = goy.copy()
    gux[:, 1:] += gdiv / dx
    gux[:, :-1] -= gdiv / dx
    guy[1:, :] += gdiv / dx
    guy[:-1, :] -= gdiv / dx
    return gux, guy


def project(ux, uy, flags, grid: Grid, params: FluidParams):
    """Chorin projection; returns ``(ux, uy, pressure)``.

    Solves ``lap(p) = rho / dt * div(u)`` and subtracts ``dt / rho * grad(p)``
    on free faces. Faces set by boundary conditions are left untouched.
    """
    (ox, oy, p), _ = _project_fwd(np.asarray(ux, float), np.asarray(uy, float),
                                  np.asarray(flags), grid, params.rho, params.dt,
                                  params.poisson_tol, params.poisson_max_iter)
    return ox, oy, p


register_adjoint(CustomAdjoint("fluid.advect_scalar", _advect_scalar_fwd, _advect_scalar_bwd))
register_adjoint(CustomAdjoint("fluid.advect_velocity", _advect_velocity_fwd, _advect_velocity_bwd))
register_adjoint(CustomAdjoint("fluid.diffuse", _diffuse_fwd, _diffuse_bwd))
register_adjoint(CustomAdjoint("fluid.buoyancy", _buoyancy_fwd, _buoyancy_bwd))
register_adjoint(CustomAdjoint("fluid.marker_source", _marker_source_fwd, _marker_source_bwd))
register_adjoint(CustomAdjoint("fluid.boundary_conditions", _bc_fwd, _bc_bwd))
register_adjoint(CustomAdjoint("fluid.project", _project_fwd, _project_bwd))


# --------------------------------------------------------------------------
# field dumps

_FIELD_MAGIC = b"FLD1"
_DTYPE_F64 = 1


def write_field(path, field: np.ndarray) -> None:
    """Write a 2D float64 field: magic, ny, nx, dtype tag (uint32 LE), then data."""
    arr = np.ascontiguousarray(field, dtype="<f8")
    if arr.ndim != 2:
        raise ValueError("field dumps are 2D")
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(struct.pack("<III", arr.shape[0], arr.shape[1], _DTYPE_F64))
        fh.write(arr.tobytes())


def read_field(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _FIELD_MAGIC:
        raise ValueError(f"{path}: not a field dump")
    ny, nx, tag = struct.unpack("<III", data[4:16])
    if tag != _DTYPE_F64:
        raise ValueError(f"{path}: unsupported dtype tag {tag}")
    return np.frombuffer(data[16:], dtype="<f8", count=ny * nx).reshape(ny, nx).copy()
