"""MLP control policy on body-frame observations."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LAYERS_2DOF = (16, 38, 38, 2)
LAYERS_3DOF = (32, 32, 32, 3)
# (history length n_p, trailing zero pad) that fill the first layer's input
HISTORY_2DOF = (1, 4)
HISTORY_3DOF = (2, 5)


def frame_dim(dof: int) -> int:
    return 6 if dof == 2 else 9


@dataclass
class PolicyParams:
    """Weights ``(out, in)`` and biases per dense layer, plus I/O scaling.

    ``F_max``/``T_max`` scale a tanh output. An infinite bound marks a linear
    (unbounded) output layer, as used by the supervised policy.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    F_max: float = 50.0
    T_max: float = 2000.0

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def dof(self) -> int:
        return 2 if self.dims[-1] == 2 else 3

    @property
    def bounded(self) -> bool:
        return bool(np.isfinite(self.F_max))

    @property
    def history(self) -> tuple[int, int]:
        d = frame_dim(self.dof)
        return self.dims[0] // d - 1, self.dims[0] % d

    def output_scale(self) -> np.ndarray:
        if not self.bounded:
            return np.ones(self.dims[-1])
        return np.array([self.F_max, self.F_max, self.T_max][: self.dims[-1]])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.trainable()])

    def trainable(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_trainable(self, arrays: list[np.ndarray]) -> PolicyParams:
        return replace(self, weights=[a.copy() for a in arrays[0::2]],
                       biases=[a.copy() for a in arrays[1::2]])

    def copy(self) -> PolicyParams:
        return replace(self, weights=[w.copy() for w in self.weights],
                       biases=[b.copy() for b in self.biases],
                       mean=self.mean.copy(), std=self.std.copy())


def init_params(dims=LAYERS_2DOF, seed: int = 0, F_max: float = 50.0, T_max: float = 2000.0,
                bounded: bool = True) -> PolicyParams:
    """Glorot-uniform weights, zero biases, identity normalisation."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if not bounded:
        F_max = T_max = float("inf")
    return PolicyParams(weights, biases, np.zeros(dims[0]), np.ones(dims[0]), F_max, T_max)


def count_parameters(params_or_dims) -> int:
    dims = params_or_dims.dims if isinstance(params_or_dims, PolicyParams) else tuple(params_or_dims)
    return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))


def forward(params: PolicyParams, z, taped: list[Tensor] | None = None):
    """Run the network on an assembled input; returns the scaled effort vector.

    ``taped`` optionally supplies tape leaves standing in for
    ``params.trainable()`` so the output is differentiable in the weights.
    """
    zv = ad.value_of(z)
    if zv.shape != (params.dims[0],):
        raise ValueError(f"policy input has shape {zv.shape}, expected ({params.dims[0]},)")
    arrays = taped if taped is not None else params.trainable()
    h = z
    n = len(params.weights)
    for k in range(n):
        h = ad.add(ad.matvec(arrays[2 * k], h), arrays[2 * k + 1])
        if k < n - 1:
            h = ad.relu(h)
    if params.bounded:
        h = ad.tanh(h)
    return ad.mul(h, params.output_scale())


def split_efforts(out, dof: int):
    """Network output -> (body-frame force 2-vector, torque)."""
    force = ad.slice(out, 0, 2)
    torque = out[2] if dof == 3 else Tensor(0.0)
    return force, torque


def observation_frame(state, objective, dof: int):
    """Body-frame frame ``[e_xy, xdot, F_c(, e_alpha, alphadot, T_c)]`` for one time step.

    ``objective`` is ``(x_obj, alpha_obj)``. Works on tensors so the frame is
    differentiable in the state.
    """
    x_obj, alpha_obj = objective
    neg = ad.mul(state.alpha, -1.0)
    e_xy = ad.rotate2d(ad.sub(np.asarray(x_obj, float), state.pos), neg)
    xdot = ad.rotate2d(state.vel, neg)
    f_c = ad.rotate2d(state.last_force, neg)
    if dof == 2:
        return ad.concat(e_xy, xdot, f_c)
    e_alpha = ad.wrap_angle(ad.sub(float(alpha_obj), state.alpha))
    return ad.concat(e_xy, xdot, f_c, e_alpha, state.omega, state.last_torque)


@dataclass
class History:
    """Newest-first frames; missing history is zero-padded."""

    n_p: int
    dim: int
    frames: deque = field(default_factory=deque)

    def push(self, frame) -> None:
        self.frames.appendleft(frame)
        while len(self.frames) > self.n_p + 1:
            self.frames.pop()

    def window(self) -> list:
        out = list(self.frames)
        while len(out) < self.n_p + 1:
            out.append(Tensor(np.zeros(self.dim)))
        return out

    def detached(self) -> History:
        return History(self.n_p, self.dim, deque(f.detach() if isinstance(f, Tensor) else f
                                                for f in self.frames))


def assemble_state(params: PolicyParams, history: History):
    """Stack the history window, zero-pad to the input width and normalise."""
    _, pad = params.history
    parts = history.window()
    if pad:
        parts = parts + [Tensor(np.zeros(pad))]
    z = ad.concat(*parts)
    return ad.mul(ad.sub(z, params.mean), 1.0 / params.std)


def new_history(params: PolicyParams) -> History:
    n_p, _ = params.history
    return History(n_p, frame_dim(params.dof))


def to_world(force, alpha):
    """Rotate a body-frame force into the world frame."""
    return ad.rotate2d(force, alpha)


class PolicyController:
    """Stateful wrapper running a policy in closed loop (no gradients)."""

    def __init__(self, params: PolicyParams, name: str = "Diff"):
        self.params = params
        self.name = name
        self.bounded = params.bounded
        self.reset()

    def reset(self) -> None:
        self.history = new_history(self.params)

    def on_new_objective(self) -> None:
        pass

    def __call__(self, state, objective):
        frame = observation_frame(state, objective, self.params.dof)
        self.history.push(frame)
        out = forward(self.params, assemble_state(self.params, self.history))
        force, torque = split_efforts(out, self.params.dof)
        return to_world(force, state.alpha).value, float(torque.value)


# --------------------------------------------------------------------------
# checkpoint format

_MAGIC = b"POL1"


def save_checkpoint(path, params: PolicyParams) -> None:
    """Binary checkpoint: magic, layer count, (in, out) per layer, weights+biases,
    normalisation mean and std, then ``(F_max, T_max)``; little-endian."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params.weights)))
        for w in params.weights:
            fh.write(struct.pack("<II", w.shape[1], w.shape[0]))
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, "<f8").tobytes())
            fh.write(np.ascontiguousarray(b, "<f8").tobytes())
        fh.write(np.ascontiguousarray(params.mean, "<f8").tobytes())
        fh.write(np.ascontiguousarray(params.std, "<f8").tobytes())
        fh.write(struct.pack("<dd", params.F_max, params.T_max))


def load_checkpoint(path) -> PolicyParams:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint")
    (n,) = struct.unpack_from("<I", data, 4)
    off = 8
    dims = []
    for _ in range(n):
        dims.append(struct.unpack_from("<II", data, off))
        off += 8

    def take(count):
        nonlocal off
        arr = np.frombuffer(data, "<f8", count, off).astype(float)
        off += 8 * count
        return arr

    weights, biases = [], []
    for fin, fout in dims:
        weights.append(take(fin * fout).reshape(fout, fin))
        biases.append(take(fout))
    mean = take(dims[0][0])
    std = take(dims[0][0])
    F_max, T_max = struct.unpack_from("<dd", data, off)
    return PolicyParams(weights, biases, mean, std, F_max, T_max)
