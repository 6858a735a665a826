"""Closed-loop rollouts, steady-state metrics and comparison tables."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import environment as env
from .environment import EnvironmentConfig, ObjectiveSchedule
from .rigid_body import BodyOutOfDomain, wrap

TRAJECTORY_COLUMNS = ("step", "t", "x", "y", "alpha", "vx", "vy", "omega", "Fc_x", "Fc_y", "Tc",
                      "x_obj", "y_obj", "alpha_obj", "Ffluid_x", "Ffluid_y", "Tfluid")
CONTROLLER_ORDER = ("RL", "LS", "Sup", "PID", "Diff")


class SegmentWarning(UserWarning):
    """An objective segment had no steps inside its steady-state window."""


@dataclass
class TrajectoryRecord:
    """Row ``n`` holds the state at ``t_n = n*dt``, the objective active then and the
    efforts applied during step ``n``."""

    dt: float
    rows: list[tuple] = field(default_factory=list)

    def append(self, step: int, state, force, torque, objective) -> None:
        x_obj, a_obj = objective
        pos = state.pos.value
        self.rows.append((step, step * self.dt, pos[0], pos[1], float(state.alpha.value),
                          *state.vel.value, float(state.omega.value), float(force[0]),
                          float(force[1]), float(torque), x_obj[0], x_obj[1], a_obj, 0.0, 0.0, 0.0))

    def set_fluid_load(self, force, torque) -> None:
        r = list(self.rows[-1])
        r[14], r[15], r[16] = float(force[0]), float(force[1]), float(torque)
        self.rows[-1] = tuple(r)

    def column(self, name: str) -> np.ndarray:
        """A stored column, or the derived error norms ``e_xy`` / ``e_alpha``."""
        if name == "e_xy":
            return np.hypot(self.column("x_obj") - self.column("x"), self.column("y_obj") - self.column("y"))
        if name == "e_alpha":
            return np.abs(wrap(self.column("alpha_obj") - self.column("alpha")))
        k = TRAJECTORY_COLUMNS.index(name)
        return np.array([r[k] for r in self.rows], dtype=float)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAJECTORY_COLUMNS)
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])

    @classmethod
    def from_csv(cls, path) -> TrajectoryRecord:
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if tuple(header) != TRAJECTORY_COLUMNS:
                raise ValueError(f"{path}: unexpected trajectory columns")
            rows = [(int(r[0]), *map(float, r[1:])) for r in rd]
        dt = rows[1][1] - rows[0][1] if len(rows) > 1 else 1.0
        return cls(dt, rows)


@dataclass(frozen=True)
class SteadyState:
    mean: float
    std: float
    segments: tuple[tuple[int, int], ...]
    segment_means: tuple[float, ...]


def windowed_error(errors, segments, hold_mode: bool = False) -> SteadyState:
    """Average error over the last three quarters of each segment.

    ``errors`` is the per-step error norm; ``segments`` are half-open step
    ranges. The mean is the average of per-segment means and the std is over
    all included steps. ``hold_mode`` uses the whole episode as one window.
    """
    e = np.asarray(errors, dtype=float)
    if hold_mode:
        windows = [(0, len(e))]
    else:
        windows = []
        for s, t in segments:
            n = t - s
            w0 = s + math.ceil(n / 4)
            if n <= 0 or w0 >= t:
                warnings.warn(f"segment [{s}, {t}) has an empty steady-state window; excluded",
                              SegmentWarning, stacklevel=2)
                continue
            windows.append((w0, t))
    windows = [(a, min(b, len(e))) for a, b in windows if a < len(e)]
    if not windows:
        return SteadyState(float("nan"), float("nan"), (), ())
    means = tuple(float(np.mean(e[a:b])) for a, b in windows)
    pooled = np.concatenate([e[a:b] for a, b in windows])
    return SteadyState(float(np.mean(means)), float(np.std(pooled)), tuple(windows), means)


def steady_state_error(traj: TrajectoryRecord, schedule: ObjectiveSchedule,
                       hold_mode: bool = False) -> dict[str, SteadyState]:
    """Steady-state error per channel (``xy`` and ``alpha``) of a recorded run."""
    segs = schedule.segments(traj.dt, len(traj))
    return {"xy": windowed_error(traj.column("e_xy"), segs, hold_mode),
            "alpha": windowed_error(traj.column("e_alpha"), segs, hold_mode)}


@dataclass
class MetricsReport:
    controller: str
    test: str
    env_id: str
    seed: int
    n_steps: int
    segments: tuple[tuple[int, int], ...]
    mean_e_xy: float
    mean_e_alpha: float
    ss_xy: SteadyState
    ss_alpha: SteadyState
    max_force: float
    max_torque: float
    complete: bool = True
    termination_step: int | None = None

    @property
    def status(self) -> str:
        return "COMPLETE" if self.complete else f"INCOMPLETE@{self.termination_step}"

    def summary_rows(self) -> list[dict]:
        rows = [dict(segment="overall", start=0, end=self.n_steps, mean_e_xy=self.mean_e_xy,
                     mean_e_alpha=self.mean_e_alpha, ss_xy_mean=self.ss_xy.mean,
                     ss_xy_std=self.ss_xy.std, ss_alpha_mean=self.ss_alpha.mean,
                     ss_alpha_std=self.ss_alpha.std, max_force=self.max_force,
                     max_torque=self.max_torque, status=self.status)]
        for k, (a, b) in enumerate(self.ss_xy.segments):
            ma = self.ss_alpha.segment_means[k] if k < len(self.ss_alpha.segment_means) else float("nan")
            rows.append(dict(segment=str(k), start=a, end=b, mean_e_xy="", mean_e_alpha="",
                             ss_xy_mean=self.ss_xy.segment_means[k], ss_xy_std="",
                             ss_alpha_mean=ma, ss_alpha_std="", max_force="", max_torque="",
                             status=""))
        return rows

    def to_csv(self, path) -> None:
        rows = self.summary_rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def metrics(record: TrajectoryRecord, schedule: ObjectiveSchedule, hold_mode: bool, *,
            controller: str = "", test: str = "", env_id: str = "", seed: int = 0,
            termination_step: int | None = None) -> MetricsReport:
    """Report computed from the trajectory record alone."""
    n = len(record)
    segs = tuple(schedule.segments(record.dt, n))
    e_xy = record.column("e_xy")
    e_a = record.column("e_alpha")
    force = np.hypot(record.column("Fc_x"), record.column("Fc_y"))
    return MetricsReport(
        controller=controller, test=test, env_id=env_id, seed=seed, n_steps=n, segments=segs,
        mean_e_xy=float(np.mean(e_xy)) if n else float("nan"),
        mean_e_alpha=float(np.mean(e_a)) if n else float("nan"),
        ss_xy=windowed_error(e_xy, segs, hold_mode),
        ss_alpha=windowed_error(e_a, segs, hold_mode),
        max_force=float(force.max()) if n else 0.0,
        max_torque=float(np.abs(record.column("Tc")).max()) if n else 0.0,
        complete=termination_step is None, termination_step=termination_step,
    )


# --------------------------------------------------------------------------
# test schedules

def random_schedule(rng: np.random.Generator, dof: int, n_targets: int = 4,
                    hold: float = 100.0) -> ObjectiveSchedule:
    targets = []
    for _ in range(n_targets):
        x, a = env.sample_objective(rng, dof)
        targets.append((*x, a))
    return ObjectiveSchedule.sequence(targets, hold)


def n_shaped_schedule(hold: float = 100.0) -> ObjectiveSchedule:
    """Fixed four-corner 'N' path used by the hyperparameter studies."""
    return ObjectiveSchedule.sequence([(30.0, 30.0, 0.0), (30.0, 70.0, 0.0),
                                       (70.0, 30.0, 0.0), (70.0, 70.0, 0.0)], hold)


def hold_schedule(cfg: EnvironmentConfig) -> ObjectiveSchedule:
    return ObjectiveSchedule.single(cfg.initial_position, 0.0)


def test_schedules(cfg: EnvironmentConfig, name: str = "random", seed: int = 0,
                   n_sims: int = 5, n_targets: int = 4, hold: float = 100.0):
    """Named stand-in test sets: ``random`` (``n_sims`` sequences), ``nshape`` or ``hold``."""
    if name == "hold" or cfg.id == "Hold":
        return [hold_schedule(cfg)]
    if name == "nshape":
        return [n_shaped_schedule(hold)]
    if name == "random":
        rng = np.random.default_rng(seed)
        return [random_schedule(rng, cfg.dof, n_targets, hold) for _ in range(n_sims)]
    raise ValueError(f"unknown schedule {name!r}; expected random, nshape or hold")


def schedule_steps(schedule: ObjectiveSchedule, dt: float, hold: float | None = None) -> int:
    """Steps covering the schedule; the last hold defaults to the schedule's own spacing (else 100)."""
    objs = schedule.objectives
    last = objs[-1].start_time
    if hold is None:
        hold = last - objs[-2].start_time if len(objs) > 1 else 100.0
    return int(round((last + hold) / dt))


# --------------------------------------------------------------------------
# rollouts

def rollout(controller, cfg: EnvironmentConfig, schedule: ObjectiveSchedule, n_steps: int,
            seed: int = 0, *, on_step=None) -> tuple[TrajectoryRecord, int | None]:
    """Closed-loop run; returns the record and the termination step (None if complete).

    The controller is queried every ``cfg.controller_sample_stride`` steps and
    its effort held in between. Memory is reset when the objective changes.
    """
    state = env.reset(cfg, schedule, seed=seed)
    record = TrajectoryRecord(cfg.dt)
    controller.reset()
    current = -1
    force, torque = np.zeros(2), 0.0
    stride = cfg.controller_sample_stride
    for n in range(n_steps):
        idx = schedule.index_at(state.t)
        obj = schedule.objectives[idx]
        objective = (obj.x_obj, obj.alpha_obj)
        if idx != current:
            if current >= 0:
                controller.on_new_objective()
            current = idx
        if n % stride == 0:
            force, torque = controller(state, objective)
            force = np.asarray(force, dtype=float)
            torque = float(torque) if cfg.dof == 3 else 0.0
        record.append(n, state, force, torque, objective)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", env.EffortClampWarning)
                state = env.step(state, (force, torque), cfg, clamp=controller.bounded)
        except BodyOutOfDomain:
            return record, n
        record.set_fluid_load(state.fluid_force, state.fluid_torque)
        if not (np.all(np.isfinite(state.pos.value)) and np.isfinite(state.alpha.value)):
            return record, n
        if on_step is not None:
            on_step(n, state)
    return record, None


def run_test(controller, cfg: EnvironmentConfig | str, schedule: ObjectiveSchedule, seed: int = 0,
             *, n_steps: int | None = None, test: str = "", out_dir=None,
             hold_mode: bool | None = None) -> tuple[TrajectoryRecord, MetricsReport]:
    if isinstance(cfg, str):
        cfg = env.make_environment(cfg)
    if n_steps is None:
        n_steps = schedule_steps(schedule, cfg.dt)
    if hold_mode is None:
        hold_mode = cfg.id == "Hold"
    record, term = rollout(controller, cfg, schedule, n_steps, seed)
    name = getattr(controller, "name", type(controller).__name__)
    report = metrics(record, schedule, hold_mode, controller=name, test=test or cfg.id,
                     env_id=cfg.id, seed=seed, termination_step=term)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{name}_{test or cfg.id}_seed{seed}"
        record.to_csv(out / f"{stem}.csv")
        report.to_csv(out / f"{stem}_report.csv")
    return record, report


# --------------------------------------------------------------------------
# comparison

def aggregate(reports: list[MetricsReport], controller: str, test: str) -> MetricsReport | dict:
    """Average several reports of one controller on one test (e.g. 5 simulations)."""
    sel = [r for r in reports if r.controller == controller and r.test == test]
    return dict(
        ss_mean=float(np.mean([r.ss_xy.mean for r in sel])),
        ss_std=float(np.mean([r.ss_xy.std for r in sel])),
        ss_alpha_mean=float(np.mean([r.ss_alpha.mean for r in sel])),
        ss_alpha_std=float(np.mean([r.ss_alpha.std for r in sel])),
        complete=all(r.complete for r in sel), n=len(sel),
    )


def _order_key(name: str):
    return (CONTROLLER_ORDER.index(name) if name in CONTROLLER_ORDER else len(CONTROLLER_ORDER), name)


@dataclass
class ComparisonTable:
    rows: list[dict]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.rows[0]) if self.rows else ["test"],
                           lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_text(self) -> str:
        head = ("test", "controller", "ss_xy", "ss_alpha", "status", "best")
        body = []
        for r in self.rows:
            body.append((r["test"], r["controller"], f"{r['ss_mean']:.4f} ± {r['ss_std']:.4f}",
                         f"{r['ss_alpha_mean']:.4f} ± {r['ss_alpha_std']:.4f}",
                         "ok" if r["complete"] else "INCOMPLETE", "*" if r["best"] else ""))
        widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(str(x).ljust(wd) for x, wd in zip(line, widths)).rstrip()
                 for line in [head, *body]]
        return "\n".join(lines) + "\n"


def compare(reports: list[MetricsReport]) -> ComparisonTable:
    """One row per (test, controller) with steady-state mean and std; best per test marked.

    Complete runs rank ahead of runs that left the domain; then lower spatial
    mean wins, ties go to lower std, then to the lexically smaller name.
    """
    tests = sorted({r.test for r in reports})
    rows = []
    for test in tests:
        names = sorted({r.controller for r in reports if r.test == test}, key=_order_key)
        group = [dict(test=test, controller=c, **aggregate(reports, c, test)) for c in names]
        ranked = sorted(group, key=lambda g: (not g["complete"],
                                              np.nan_to_num(g["ss_mean"], nan=np.inf),
                                              np.nan_to_num(g["ss_std"], nan=np.inf),
                                              g["controller"]))
        for g in group:
            g["best"] = g is ranked[0]
        rows.extend(group)
    return ComparisonTable(rows)
