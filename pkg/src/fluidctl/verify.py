"""Built-in oracle suites behind ``fluidctl verify``."""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import baselines as B
from . import environment as env
from . import fluid as fl
from . import losses as L
from . import policy as pol
from . import rigid_body as rb


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def projection_case(n: int = 64, seed: int = 0):
    """Random face velocities around a rotated, moving box obstacle."""
    g = fl.Grid.square(n)
    r = np.random.default_rng(seed)
    body = rb.BodyState([50.0, 50.0], 0.3)
    flags, _ = rb.rasterize(rb.BodyShape.box(20, 6), body, g, fl.boundary_flags(g))
    ux, uy = r.normal(size=(n, n + 1)), r.normal(size=(n + 1, n))
    ux, uy = fl.apply_boundary_conditions(ux, uy, flags, g, body.x_r, [0.3, 0.1], 0.05)
    return g, flags, ux, uy


def projection_divergence(params: fl.FluidParams | None = None, n: int = 64,
                          seeds=(0, 1, 2)) -> SuiteResult:
    params = params or fl.FluidParams()
    worst_ratio, worst_time = 0.0, 0.0
    for s in seeds:
        g, flags, ux, uy = projection_case(n, s)
        t0 = time.perf_counter()
        ox, oy, _ = fl.project(ux, uy, flags, g, params)
        worst_time = max(worst_time, time.perf_counter() - t0)
        fluid = flags == fl.CellType.FLUID
        d0 = np.abs(fl.divergence(ux, uy, g.dx)[fluid]).max()
        d1 = np.abs(fl.divergence(ox, oy, g.dx)[fluid]).max()
        worst_ratio = max(worst_ratio, d1 / d0)
    ok = worst_ratio < 1e-4 and worst_time < 1.0
    return SuiteResult("projection divergence", ok,
                       f"max ratio {worst_ratio:.2e} (< 1e-4), max time {worst_time:.3f}s (< 1s)")


def _weighted_sum(outs, seed: int = 5):
    outs = outs if isinstance(outs, tuple) else (outs,)
    r = np.random.default_rng(seed)
    total = ad.Tensor(0.0)
    for o in outs:
        total = ad.add(total, ad.sum(ad.mul(o, r.standard_normal(o.shape))))
    return total


def projection_adjoint() -> SuiteResult:
    g = fl.Grid.square(8, 8.0)
    r = np.random.default_rng(1)
    flags = fl.boundary_flags(g)
    flags[3:5, 3:5] = fl.CellType.OBSTACLE
    uy = r.normal(size=(9, 8))

    def f(u):
        return _weighted_sum(ad.record("fluid.project", u, uy, flags=flags, grid=g, rho=1.0,
                                       dt=0.1, tol=1e-14, max_iter=1000))

    err = ad.grad_check(f, r.normal(size=(8, 9)))
    return SuiteResult("projection adjoint (8x8)", err < 1e-6, f"rel err {err:.2e} (< 1e-6)")


def primitive_adjoints() -> SuiteResult:
    r = np.random.default_rng(2)
    m = r.normal(size=(4, 5))

    def f(x):
        h = ad.tanh(ad.add(ad.matvec(m, x), 0.1))
        y = ad.rotate2d(ad.slice(h, 0, 2), ad.wrap_angle(h[2]))
        return ad.add(ad.sum(ad.square(ad.concat(y, ad.relu(h)))), ad.div(h[3], 3.0))

    err = ad.grad_check(f, r.normal(size=5))
    return SuiteResult("primitive adjoints", err < 1e-6, f"rel err {err:.2e} (< 1e-6)")


def coupled_window_loss(cfg: env.EnvironmentConfig, l: int, seed: int
                        ) -> tuple[Callable[[ad.Tensor], ad.Tensor], np.ndarray]:
    """Window loss as a function of the first world-frame control effort.

    Later efforts are fixed random draws; the loss uses the 2-DOF defaults
    with horizon ``l``.
    """
    rng = np.random.default_rng(seed)
    x_obj, a_obj = env.sample_objective(rng, cfg.dof)
    efforts = rng.uniform(-20, 20, size=(l, 2))
    torques = rng.uniform(-500, 500, size=l) if cfg.dof == 3 else np.zeros(l)
    w = L.LossWeights.defaults(cfg.dof)
    w = L.LossWeights(**{**w.__dict__, "l": l})

    def fn(f0):
        s = env.reset(cfg)
        tr = L.WindowTrace()
        for n in range(l):
            f = f0 if n == 0 else efforts[n]
            t = ad.Tensor(float(torques[n]))
            s = env.step(s, (f, t), cfg, clamp=False)
            tr.append(ad.sub(np.asarray(x_obj), s.pos), ad.sub(a_obj, s.alpha), s.vel, s.omega, f, t)
        return L.total_loss(tr, w)

    return fn, efforts[0]


def coupled_gradient(seeds=range(10), l: int = 4, resolution: int = 32) -> SuiteResult:
    cfg = env.make_environment("BaseNR", {"resolution": resolution, "poisson_tol": 1e-12})
    errs = []
    for s in seeds:
        fn, f0 = coupled_window_loss(cfg, l, s)
        errs.append(ad.grad_check(fn, f0, eps=1e-4))
    worst = max(errs)
    return SuiteResult(f"coupled window gradient (l={l}, {resolution}x{resolution}, {len(errs)} seeds)",
                       worst < 1e-3, f"max rel err {worst:.2e} (< 1e-3)")


def pid_oracle(g: B.PIDGains, errors) -> np.ndarray:
    out = []
    for t in range(len(errors)):
        prev = errors[t - 1] if t > 0 else 0.0
        out.append(g.P * errors[t] + g.D * (errors[t] - prev) / 0.1 + 0.1 * sum(errors[: t + 1]) * g.I)
    return np.array(out)


def loopshaping_oracle(c: B.LoopShapingCoeffs, errors) -> np.ndarray:
    u: list[float] = []
    for t in range(len(errors)):
        acc = sum(errors[t - p] * c.n[p] for p in range(3) if t - p >= 0)
        acc -= sum(u[t - p] * c.d[p - 1] for p in (1, 2) if t - p >= 0)
        u.append(acc)
    return np.array(u)


def _run(step, params, errors) -> np.ndarray:
    mem = B.ControllerMemory()
    out = []
    for e in errors:
        u, mem = step(params, e, mem)
        out.append(u)
    return np.array(out)


LISTED_LOOPSHAPING = ("1.1700924033918623", "-1.4694211940919182", "0.30598060140064326",
                      "-1.2306775904257603", "0.26726488821832250")


def baseline_oracles(n_steps: int = 100, seeds=range(5)) -> SuiteResult:
    worst = 0.0
    for s in seeds:
        errors = list(np.random.default_rng(s).normal(size=n_steps) * 5)
        for g in (B.PID_CYLINDER_FORCE, B.PID_BOX_FORCE, B.PID_BOX_TORQUE):
            ref = pid_oracle(g, errors)
            worst = max(worst, float(np.max(np.abs(_run(B.pid_step, g, errors) - ref)
                                            / np.maximum(1.0, np.abs(ref)))))
        ref = loopshaping_oracle(B.LOOPSHAPING, errors)
        worst = max(worst, float(np.max(np.abs(_run(B.loopshaping_step, B.LOOPSHAPING, errors) - ref)
                                        / np.maximum(1.0, np.abs(ref)))))
    stored = (*B.LOOPSHAPING.n, *B.LOOPSHAPING.d)
    exact = all(struct.pack("<d", float(a)) == struct.pack("<d", b)
                for a, b in zip(LISTED_LOOPSHAPING, stored))
    return SuiteResult("baseline formula oracles", worst < 1e-12 and exact,
                       f"max rel err {worst:.1e} over {n_steps} steps (< 1e-12), "
                       f"coefficients bit-exact: {exact}")


def parameter_counts() -> SuiteResult:
    n2 = pol.count_parameters(pol.init_params(pol.LAYERS_2DOF))
    dims = pol.init_params(pol.LAYERS_2DOF).dims
    ok = n2 == 2206 and dims == (16, 38, 38, 2)
    return SuiteResult("policy parameter count", ok, f"2-DOF {n2} params, layers {dims}")


def loss_examples() -> SuiteResult:
    def trace(**kw):
        tr = L.WindowTrace()
        tr.append(np.asarray(kw.get("e_xy", (0.0, 0.0)), float), kw.get("e_a", 0.0),
                  np.asarray(kw.get("xdot", (0.0, 0.0)), float), 0.0,
                  np.asarray(kw.get("F", (0.0, 0.0)), float), 0.0)
        return tr

    zero = dict(beta_xy=0, beta_alpha=0, beta_xdot=0, beta_alphadot=0, beta_prox=0, beta_F=0,
                beta_T=0, beta_dF=0, beta_dT=0, l=1)
    two = L.WindowTrace()
    two.append(np.array([1.0, 0.0]), 0.0, np.zeros(2), 0.0, np.zeros(2), 0.0)
    two.append(np.array([0.0, 1.0]), 0.0, np.zeros(2), 0.0, np.zeros(2), 0.0)
    cases = [
        (L.objective_term(two, L.LossWeights(**{**zero, "beta_xy": 5, "l": 2})), 5.0),
        (L.objective_term(trace(e_a=0.1), L.LossWeights(**{**zero, "beta_alpha": 30})), 0.3),
        (L.velocity_term(trace(xdot=(2, 0), e_xy=(3, 4)),
                         L.LossWeights(**{**zero, "beta_xdot": 5, "beta_prox": 0.1})), 5 * 4 / 3.5),
        (L.velocity_term(trace(xdot=(2, 0)), L.LossWeights(**{**zero, "beta_xdot": 5,
                                                               "beta_prox": 0.1})), 20.0),
        (L.effort_term(trace(F=(3, 4)), L.LossWeights(**{**zero, "beta_F": 0.1, "beta_dF": 1})), 27.5),
    ]
    worst = max(abs(float(t.value) - ref) for t, ref in cases)
    return SuiteResult("loss examples", worst <= 1e-12, f"max abs err {worst:.1e} (<= 1e-12)")


def run_all(fluid_params: fl.FluidParams | None = None, quick: bool = False) -> list[SuiteResult]:
    """Every suite; ``quick`` trims the coupled gradient check to three seeds."""
    return [
        primitive_adjoints(),
        projection_divergence(fluid_params),
        projection_adjoint(),
        coupled_gradient(range(3) if quick else range(10)),
        baseline_oracles(),
        parameter_counts(),
        loss_examples(),
    ]
