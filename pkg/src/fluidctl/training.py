"""Training by backpropagation through the simulator, and the supervised pipeline."""

from __future__ import annotations

import csv
import math
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import environment as env
from . import policy as pol
from .baselines import make_baseline
from .environment import EnvironmentConfig, ObjectiveSchedule
from .evaluation import windowed_error
from .losses import LossWeights, WindowTrace, breakdown
from .rigid_body import BodyOutOfDomain, rotation

LOG_COLUMNS = ("iteration", "lr", "loss", "O", "V", "E", "wall_time")


class NonFiniteLoss(FloatingPointError):
    """Raised when a window loss is not finite; ``dump`` holds the window trace."""

    def __init__(self, msg: str, dump: dict):
        super().__init__(msg)
        self.dump = dump


@dataclass
class TrainConfig:
    env_id: str = "BaseNR"
    n_i: int = 1000
    l: int = 16
    lr0: float = 0.01
    lr_half_every: int = 200
    episode_length: int = 1000
    seed: int = 0
    weights: LossWeights | None = None
    env_overrides: dict = field(default_factory=dict)
    history: tuple[int, int] | None = None
    clip_norm: float = 1.0
    warmup_episodes: int = 10
    warmup_steps: int = 200
    val_every: int = 100
    val_targets: int = 2
    val_steps: int = 300
    # shrinks the last layer at init so the tanh output starts unsaturated
    output_init_scale: float = 0.1

    @classmethod
    def defaults(cls, env_id: str = "BaseNR", **kw) -> TrainConfig:
        dof = env.make_environment(env_id).dof
        base = dict(n_i=1000, lr_half_every=200) if dof == 2 else dict(n_i=5000, lr_half_every=1000)
        base.update(kw)
        return cls(env_id=env_id, **base)

    def environment(self) -> EnvironmentConfig:
        return env.make_environment(self.env_id, self.env_overrides)

    def loss_weights(self, dof: int) -> LossWeights:
        from dataclasses import replace
        w = self.weights or LossWeights.defaults(dof)
        return replace(w, l=self.l) if w.l != self.l else w


def lr_schedule(cfg: TrainConfig, iteration: int) -> float:
    return cfg.lr0 * 0.5 ** (iteration // cfg.lr_half_every)


class Adam:
    """Adaptive-moment optimizer with the usual default decay constants."""

    def __init__(self, shapes, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> list[np.ndarray]:
        self.t += 1
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1**self.t)
            vh = self.v[k] / (1 - self.b2**self.t)
            out.append(p - lr * mh / (np.sqrt(vh) + self.eps))
        return out


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def architecture(dof: int, history: tuple[int, int] | None = None) -> tuple[int, ...]:
    dims = pol.LAYERS_2DOF if dof == 2 else pol.LAYERS_3DOF
    if history is not None:
        n_p, pad = history
        dims = ((n_p + 1) * pol.frame_dim(dof) + pad,) + dims[1:]
    return dims


# --------------------------------------------------------------------------
# normalisation statistics

def warmup_statistics(env_cfg: EnvironmentConfig, params: pol.PolicyParams, rng: np.random.Generator,
                      episodes: int = 10, steps: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Per-input mean/std of observation frames seen under PID control.

    Frame statistics are tiled over the history slots; pad entries get (0, 1).
    """
    dof = env_cfg.dof
    frames = []
    for _ in range(episodes):
        x, a = env.sample_objective(rng, dof)
        state = env.reset(env_cfg, ObjectiveSchedule.single(x, a))
        ctrl = make_baseline("pid", env_cfg)
        for n in range(steps):
            if n % env_cfg.controller_sample_stride == 0:
                frames.append(pol.observation_frame(state, (x, a), dof).value)
                f, t = ctrl(state, (x, a))
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", env.EffortClampWarning)
                    state = env.step(state, (f, t), env_cfg)
            except BodyOutOfDomain:
                break
    frames = np.array(frames)
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    std = np.where(std > 1e-8, std, 1.0)
    n_p, pad = params.history
    mean = np.concatenate([np.tile(mean, n_p + 1), np.zeros(pad)])
    std = np.concatenate([np.tile(std, n_p + 1), np.ones(pad)])
    return mean, std


# --------------------------------------------------------------------------
# differentiable-physics training

@dataclass
class _Episode:
    state: env.SimState
    history: pol.History
    objective: tuple
    steps: int = 0
    prev_force: np.ndarray = field(default_factory=lambda: np.zeros(2))
    prev_torque: float = 0.0


def _new_episode(env_cfg, params, rng) -> _Episode:
    x, a = env.sample_objective(rng, env_cfg.dof)
    state = env.reset(env_cfg, ObjectiveSchedule.single(x, a))
    ep = _Episode(state, pol.new_history(params), (x, a))
    n_p, _ = params.history
    # advance with zero control until n_p past frames exist
    for _ in range(n_p):
        ep.history.push(pol.observation_frame(ep.state, ep.objective, env_cfg.dof))
        for _ in range(env_cfg.controller_sample_stride):
            ep.state = env.step(ep.state, (np.zeros(2), 0.0), env_cfg)
            ep.steps += 1
    return ep


def _run_window(ep: _Episode, env_cfg, params, leaves, weights: LossWeights):
    dof = env_cfg.dof
    stride = env_cfg.controller_sample_stride
    x_obj = np.asarray(ep.objective[0], float)
    a_obj = float(ep.objective[1])
    trace = WindowTrace(F_prev=ep.prev_force, T_prev=ep.prev_torque)
    state, hist = ep.state, ep.history
    for _ in range(weights.l):
        hist.push(pol.observation_frame(state, ep.objective, dof))
        out = pol.forward(params, pol.assemble_state(params, hist), taped=leaves)
        f_body, torque = pol.split_efforts(out, dof)
        f_world = pol.to_world(f_body, state.alpha)
        for _ in range(stride):
            state = env.step(state, (f_world, torque), env_cfg, clamp=False)
        trace.append(ad.sub(x_obj, state.pos), ad.sub(a_obj, state.alpha), state.vel,
                     state.omega, f_body, torque)
    return state, trace


def validate(params: pol.PolicyParams, env_cfg: EnvironmentConfig, targets, steps: int) -> float:
    """Steady-state spatial error of the policy over a fixed target sequence."""
    from .evaluation import rollout
    hold = steps * env_cfg.dt
    sched = ObjectiveSchedule.sequence(targets, hold)
    rec, term = rollout(pol.PolicyController(params), env_cfg, sched, steps * len(targets))
    if term is not None:
        return float("inf")
    return windowed_error(rec.column("e_xy"), sched.segments(env_cfg.dt, len(rec))).mean


@dataclass
class TrainResult:
    params: pol.PolicyParams
    final: pol.PolicyParams
    log: list[dict]
    validation: list[tuple[int, float]]
    best_iteration: int


def train_diffphys(cfg: TrainConfig, *, log_path=None, checkpoint_dir=None,
                   progress=None) -> TrainResult:
    """Optimise a fresh policy over ``cfg.n_i`` disjoint l-step windows.

    Each window records a new tape from detached state, computes the window
    loss on post-step states, backpropagates through the coupled simulator
    and takes one clipped Adam step; a window in which the body leaves the
    domain is discarded and the episode restarted, so ``n_i`` counts updates.
    Returns the best-validation parameters.
    """
    env_cfg = cfg.environment()
    dof = env_cfg.dof
    weights = cfg.loss_weights(dof)
    rng = np.random.default_rng(cfg.seed)
    params = pol.init_params(architecture(dof, cfg.history), seed=cfg.seed,
                             F_max=env_cfg.F_max, T_max=env_cfg.T_max)
    params.weights[-1] = params.weights[-1] * cfg.output_init_scale
    if cfg.n_i == 0:
        return TrainResult(params, params, [], [], 0)

    mean, std = warmup_statistics(env_cfg, params, np.random.default_rng(cfg.seed + 7919),
                                  cfg.warmup_episodes, cfg.warmup_steps)
    params.mean, params.std = mean, std
    val_rng = np.random.default_rng(cfg.seed + 104729)
    val_targets = [(*x, a) for x, a in (env.sample_objective(val_rng, dof)
                                        for _ in range(cfg.val_targets))]

    opt = Adam([a.shape for a in params.trainable()])
    log: list[dict] = []
    val_hist: list[tuple[int, float]] = []
    best, best_err, best_it = params.copy(), float("inf"), 0
    t0 = time.perf_counter()
    ep = _new_episode(env_cfg, params, rng)
    log_fh = None
    if log_path is not None:
        log_fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()

    def run_validation(it):
        nonlocal best, best_err, best_it
        err = validate(params, env_cfg, val_targets, cfg.val_steps)
        val_hist.append((it, err))
        if err < best_err:
            best, best_err, best_it = params.copy(), err, it
            if checkpoint_dir is not None:
                pol.save_checkpoint(Path(checkpoint_dir) / "best.pol", best)

    try:
        it, validated = 0, -1
        while it < cfg.n_i:
            if cfg.val_every and it % cfg.val_every == 0 and validated != it:
                run_validation(it)
                validated = it
            if ep.steps + weights.l * env_cfg.controller_sample_stride > cfg.episode_length:
                ep = _new_episode(env_cfg, params, rng)
            tape = ad.Tape()
            leaves = [tape.leaf(a) for a in params.trainable()]
            ep.state = ep.state.detached()
            ep.history = ep.history.detached()
            try:
                state, trace = _run_window(ep, env_cfg, params, leaves, weights)
            except BodyOutOfDomain:
                ep = _new_episode(env_cfg, params, rng)
                continue
            parts = breakdown(trace, weights)
            loss = float(parts.total.value)
            if not math.isfinite(loss):
                dump = dict(iteration=it, objective=ep.objective,
                            pos=[np.asarray(ad.value_of(v)).tolist() for v in trace.e_xy],
                            efforts=[np.asarray(ad.value_of(f)).tolist() for f in trace.F_c])
                raise NonFiniteLoss(f"non-finite loss at iteration {it}", dump)
            grads = tape.gradient(parts.total, leaves)
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            lr = lr_schedule(cfg, it)
            params = params.with_trainable(opt.step(params.trainable(), grads, lr))
            ep.state = state
            ep.steps += weights.l * env_cfg.controller_sample_stride
            ep.prev_force = np.asarray(ad.value_of(trace.F_c[-1])).copy()
            ep.prev_torque = float(ad.value_of(trace.T_c[-1]))
            row = dict(iteration=it, lr=lr, loss=loss, O=parts.O, V=parts.V, E=parts.E,
                       wall_time=time.perf_counter() - t0)
            log.append(row)
            if log_fh is not None:
                writer.writerow(row)
            if progress is not None:
                progress(row)
            it += 1
        if cfg.val_every:
            run_validation(cfg.n_i)
    finally:
        if log_fh is not None:
            log_fh.close()
    if not cfg.val_every:
        best, best_it = params.copy(), cfg.n_i
    return TrainResult(best, params, log, val_hist, best_it)


# --------------------------------------------------------------------------
# supervised pipeline

def quintic(p0, p1, n_steps: int, dt: float) -> np.ndarray:
    """Rest-to-rest quintic from ``p0`` to ``p1``; returns positions at steps 0..n_steps."""
    p0 = np.atleast_1d(np.asarray(p0, float))
    p1 = np.atleast_1d(np.asarray(p1, float))
    s = np.arange(n_steps + 1) / n_steps
    h = 10 * s**3 - 15 * s**4 + 6 * s**5
    return p0 + h[:, None] * (p1 - p0)


@dataclass
class SupervisedSim:
    """One kinematically driven run: inputs, body-frame targets and the prescribed path."""

    z: np.ndarray
    targets: np.ndarray
    path: np.ndarray
    angles: np.ndarray
    objective: tuple


@dataclass
class Dataset:
    train: list[SupervisedSim]
    val: list[SupervisedSim]

    @staticmethod
    def stack(sims: list[SupervisedSim]) -> tuple[np.ndarray, np.ndarray]:
        if not sims:
            return np.zeros((0, 0)), np.zeros((0, 3))
        return np.concatenate([s.z for s in sims]), np.concatenate([s.targets for s in sims])

    def arrays(self):
        return self.stack(self.train), self.stack(self.val)

    def __len__(self) -> int:
        return sum(len(s.z) for s in self.train + self.val)


def split_counts(n_sims: int) -> tuple[int, int]:
    """80/20 split, with the validation share capped at 20 simulations."""
    if n_sims < 2:
        raise ValueError("need at least 2 simulations for a train/validation split")
    n_val = min(20, max(1, round(0.2 * n_sims)))
    return n_sims - n_val, n_val


def prescribed_run(env_cfg: EnvironmentConfig, params: pol.PolicyParams, objective,
                   n_steps: int) -> SupervisedSim:
    """Drive the body along a quintic path to ``objective`` and record targets.

    Positions follow the quintic exactly; velocities and accelerations use
    the integrator's own differences (``v_{n+1} = (x_{n+1}-x_n)/dt``) so that
    feeding the targets back through the dynamics reproduces the path.
    """
    dof = env_cfg.dof
    dt = env_cfg.dt
    m, I = env_cfg.props.m, env_cfg.props.I
    x_obj, a_obj = objective
    path = quintic(env_cfg.initial_position, x_obj, n_steps, dt)
    angles = quintic([0.0], [a_obj if dof == 3 else 0.0], n_steps, dt)[:, 0]
    vel = np.zeros_like(path)
    vel[1:] = np.diff(path, axis=0) / dt
    omega = np.zeros_like(angles)
    omega[1:] = np.diff(angles) / dt
    acc = np.diff(vel, axis=0) / dt
    ang_acc = np.diff(omega) / dt

    state = env.reset(env_cfg, ObjectiveSchedule.single(x_obj, a_obj))
    hist = pol.new_history(params)
    zs, targets = [], []
    for n in range(n_steps):
        hist.push(pol.observation_frame(state, objective, dof))
        zs.append(pol.assemble_state(params, hist).value)
        new = env.step(state, (np.zeros(2), 0.0), env_cfg, clamp=False)
        f_ext, t_ext = env.external_forcing(env_cfg.forcing_schedule, state.t)
        f_hat = m * acc[n] - new.fluid_force - f_ext
        t_hat = (I * ang_acc[n] - new.fluid_torque - t_ext) if dof == 3 else 0.0
        body_f = rotation(-angles[n]) @ f_hat
        targets.append([body_f[0], body_f[1], t_hat])
        new.pos = ad.Tensor(path[n + 1])
        new.vel = ad.Tensor(vel[n + 1])
        new.alpha = ad.Tensor(angles[n + 1])
        new.omega = ad.Tensor(omega[n + 1])
        new.last_force = ad.Tensor(f_hat)
        new.last_torque = ad.Tensor(t_hat)
        state = new
    return SupervisedSim(np.array(zs), np.array(targets), path, angles,
                         (tuple(x_obj), float(a_obj)))


def generate_supervised_dataset(env_cfg: EnvironmentConfig, n_sims: int = 100, n_steps: int = 500,
                                seed: int = 0, history: tuple[int, int] | None = None,
                                progress=None) -> Dataset:
    """Simulations split by run into training and validation sets.

    Inputs ``z`` are stored unnormalised; statistics are fitted at training time.
    """
    n_train, _ = split_counts(n_sims)
    rng = np.random.default_rng(seed)
    raw = pol.init_params(architecture(env_cfg.dof, history), bounded=False)
    sims = []
    while len(sims) < n_sims:
        objective = env.sample_objective(rng, env_cfg.dof)
        try:
            sims.append(prescribed_run(env_cfg, raw, objective, n_steps))
        except BodyOutOfDomain:
            continue
        if progress is not None:
            progress(len(sims))
    return Dataset(sims[:n_train], sims[n_train:])


def replay(env_cfg: EnvironmentConfig, sim: SupervisedSim) -> np.ndarray:
    """Drive the body dynamically with the recorded efforts; returns positions."""
    state = env.reset(env_cfg, ObjectiveSchedule.single(*sim.objective))
    out = [state.pos.value.copy()]
    for tgt in sim.targets:
        alpha = float(state.alpha.value)
        f = rotation(alpha) @ tgt[:2]
        state = env.step(state, (f, float(tgt[2])), env_cfg, clamp=False)
        out.append(state.pos.value.copy())
    return np.array(out)


_DSET = b"DSET"


def write_dataset(path, sims: list[SupervisedSim]) -> None:
    """Binary samples: magic, count and z dim (u32), then z followed by 3 targets (f64)."""
    z, y = Dataset.stack(sims)
    with open(path, "wb") as fh:
        fh.write(_DSET)
        fh.write(struct.pack("<II", len(z), z.shape[1] if z.size else 0))
        fh.write(np.ascontiguousarray(np.hstack([z, y]) if len(z) else np.zeros(0), "<f8").tobytes())


def read_dataset(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _DSET:
        raise ValueError(f"{path}: not a dataset file")
    n, d = struct.unpack_from("<II", data, 4)
    arr = np.frombuffer(data, "<f8", n * (d + 3), 12).reshape(n, d + 3).astype(float)
    return arr[:, :d], arr[:, d:]


@dataclass
class SupervisedResult:
    params: pol.PolicyParams
    train_loss: list[float]
    val_loss: list[tuple[int, float]]
    best_iteration: int


def _mse(params: pol.PolicyParams, z: np.ndarray, y: np.ndarray) -> float:
    h = (z - params.mean) / params.std
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if k < len(params.weights) - 1:
            h = np.maximum(h, 0.0)
    return float(np.mean(np.sum((h - y[:, : h.shape[1]]) ** 2, axis=1)))


def batch_gradients(params: pol.PolicyParams, zn: np.ndarray,
                    y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean squared error of a linear-output policy on normalised inputs, and its
    gradients in ``params.trainable()`` order (dense forward/backward on the batch)."""
    n_layers = len(params.weights)
    acts = [zn]
    h = zn
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if k < n_layers - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    diff = h - y
    g = 2.0 * diff / len(zn)
    grads: list[np.ndarray] = [None] * (2 * n_layers)
    for k in range(n_layers - 1, -1, -1):
        grads[2 * k] = g.T @ acts[k]
        grads[2 * k + 1] = g.sum(axis=0)
        if k > 0:
            g = (g @ params.weights[k]) * (acts[k] > 0)
    return float(np.mean(np.sum(diff**2, axis=1))), grads


def train_supervised(train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray] | None,
                     dof: int = 2, n_i: int = 150_000, lr0: float = 0.01, lr_half_every: int = 15_000,
                     batch_size: int = 128, seed: int = 0, val_every: int = 1000,
                     progress=None) -> SupervisedResult:
    """Minibatch regression of body-frame efforts with a linear output layer."""
    z, y = train
    if len(z) == 0:
        raise ValueError("empty training set")
    y = y[:, :dof]
    rng = np.random.default_rng(seed)
    dims = (z.shape[1],) + (pol.LAYERS_2DOF if dof == 2 else pol.LAYERS_3DOF)[1:]
    params = pol.init_params(dims, seed=seed, bounded=False)
    params.mean = z.mean(axis=0)
    std = z.std(axis=0)
    params.std = np.where(std > 1e-8, std, 1.0)
    zn = (z - params.mean) / params.std
    opt = Adam([a.shape for a in params.trainable()])
    best, best_val, best_it = params.copy(), float("inf"), 0
    losses, vals = [], []
    sched = TrainConfig(lr0=lr0, lr_half_every=lr_half_every)

    def check(it):
        nonlocal best, best_val, best_it
        v = _mse(params, *val) if val is not None and len(val[0]) else _mse(params, z, y)
        vals.append((it, v))
        if v < best_val:
            best, best_val, best_it = params.copy(), v, it

    for it in range(n_i):
        if it % val_every == 0:
            check(it)
        idx = rng.integers(0, len(z), size=min(batch_size, len(z)))
        loss, grads = batch_gradients(params, zn[idx], y[idx])
        losses.append(loss)
        params = params.with_trainable(opt.step(params.trainable(), grads, lr_schedule(sched, it)))
        if progress is not None and it % val_every == 0:
            progress(it, losses[-1])
    check(n_i)
    return SupervisedResult(best, losses, vals, best_it)
