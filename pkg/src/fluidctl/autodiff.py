"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every operation whose inputs carry the tape. Each
operation is a :class:`CustomAdjoint`: a forward function returning
``(outputs, saved)`` and a backward function mapping output cotangents to
input cotangents using ``saved``. The dense primitives used by the policy
and the losses are registered here; the physics modules register their own
adjoints at import time.

Values without a tape are plain constants, so the same code path runs
both eagerly (evaluation) and recorded (training)::

    tape = Tape()
    x = tape.leaf(np.array(3.0))
    y = square(x)
    (gx,) = tape.gradient(y, [x])   # 6.0
"""

from __future__ import annotations

import builtins
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "CustomAdjoint",
    "register_adjoint",
    "get_adjoint",
    "record",
    "grad_check",
    "directional_check",
    "value_of",
    "add",
    "sub",
    "mul",
    "div",
    "matvec",
    "matmul",
    "relu",
    "tanh",
    "sum",
    "square",
    "concat",
    "slice",
    "rotate2d",
    "wrap_angle",
]


@dataclass(frozen=True)
class CustomAdjoint:
    """Forward/adjoint pair dispatched by :func:`record`.

    ``forward(*arrays, **attrs)`` returns ``(out, saved)`` where ``out`` is an
    array or a tuple of arrays. ``backward(saved, gouts)`` receives a tuple of
    output cotangents (same arity as ``out``) and returns one cotangent or
    ``None`` per input.
    """

    name: str
    forward: Callable[..., tuple[Any, Any]]
    backward: Callable[[Any, tuple], Sequence[np.ndarray | None]]


_REGISTRY: dict[str, CustomAdjoint] = {}


def register_adjoint(adj: CustomAdjoint) -> CustomAdjoint:
    if adj.name in _REGISTRY:
        raise ValueError(f"adjoint {adj.name!r} is already registered")
    _REGISTRY[adj.name] = adj
    return adj


def get_adjoint(name: str) -> CustomAdjoint:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"no adjoint registered under {name!r}") from None


class Tensor:
    """A float64 array, optionally attached to a tape node output."""

    __slots__ = ("value", "tape", "node", "slot")

    def __init__(self, value, tape: Tape | None = None, node: int | None = None, slot: int = 0):
        arr = np.array(value, dtype=np.float64)
        arr.flags.writeable = False
        self.value = arr
        self.tape = tape
        self.node = node
        self.slot = slot

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node {self.node}"
        return f"Tensor({self.value!r}, {where})"

    def __float__(self) -> float:
        return float(self.value)

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        if np.ndim(value_of(other)) == 1:
            return matvec(self, other)
        return matmul(self, other)

    def __getitem__(self, item):
        if isinstance(item, int):
            return slice(self, item, item + 1).reshape_scalar()
        if isinstance(item, builtins.slice):
            start, stop, step = item.indices(self.shape[0])
            if step != 1:
                raise IndexError("only unit-stride slices are supported")
            return slice(self, start, stop)
        raise IndexError(f"unsupported index {item!r}")

    def reshape_scalar(self) -> Tensor:
        return record("squeeze", self)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class _Node:
    __slots__ = ("adj", "inputs", "saved", "out_shapes")

    def __init__(self, adj, inputs, saved, out_shapes):
        self.adj = adj
        self.inputs = inputs
        self.saved = saved
        self.out_shapes = out_shapes


class Tape:
    """Append-only record of operations; supports one backward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value) -> Tensor:
        arr = np.array(value, dtype=np.float64)
        self._nodes.append(_Node(None, (), None, (arr.shape,)))
        return Tensor(arr, self, len(self._nodes) - 1)

    def _push(self, adj, inputs, saved, out_shapes) -> int:
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        self._nodes.append(_Node(adj, inputs, saved, out_shapes))
        return len(self._nodes) - 1

    def gradient(self, loss: Tensor, leaves: Sequence[Tensor], cotangent=None,
                 retain: bool = False) -> list[np.ndarray]:
        """Return d(loss)/d(leaf) for every leaf.

        ``cotangent`` seeds the backward pass (defaults to 1 for a scalar
        loss). Leaves the loss does not depend on get exact zeros. Saved
        intermediates are released afterwards unless ``retain`` is set.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        if cotangent is None:
            if loss.value.size != 1:
                raise ValueError(f"loss must be scalar, got shape {loss.shape}")
            seed = np.ones_like(loss.value)
        else:
            seed = np.broadcast_to(np.asarray(cotangent, dtype=np.float64), loss.shape).copy()

        grads: dict[tuple[int, int], np.ndarray] = {(loss.node, loss.slot): seed}
        for idx in range(loss.node, -1, -1):
            node = self._nodes[idx]
            if node.adj is None:
                continue
            nout = len(node.out_shapes)
            if not any((idx, s) in grads for s in range(nout)):
                continue
            gouts = tuple(
                grads.pop((idx, s)) if (idx, s) in grads else np.zeros(shape)
                for s, shape in enumerate(node.out_shapes)
            )
            gins = node.adj.backward(node.saved, gouts)
            for ref, g in zip(node.inputs, gins):
                if ref is None or g is None:
                    continue
                key = ref
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = np.array(g, dtype=np.float64)

        out = []
        for leaf in leaves:
            if leaf.tape is not self:
                raise ValueError("leaf does not belong to this tape")
            g = grads.get((leaf.node, leaf.slot))
            out.append(np.zeros(leaf.shape) if g is None else g.reshape(leaf.shape))
        if not retain:
            self._consumed = True
            for node in self._nodes:
                node.saved = None
        return out


def record(name: str, *inputs, **attrs):
    """Evaluate adjoint ``name`` on ``inputs``; record it if any input is taped."""
    adj = get_adjoint(name)
    tape = None
    for x in inputs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError(f"{name}: inputs belong to different tapes")
    values = [value_of(x) for x in inputs]
    out, saved = adj.forward(*values, **attrs)
    multi = isinstance(out, tuple)
    outs = out if multi else (out,)
    if tape is None:
        result = tuple(Tensor(o) for o in outs)
    else:
        refs = tuple(
            (x.node, x.slot) if isinstance(x, Tensor) and x.tape is tape else None
            for x in inputs
        )
        idx = tape._push(adj, refs, saved, tuple(np.shape(o) for o in outs))
        result = tuple(Tensor(o, tape, idx, s) for s, o in enumerate(outs))
    return result if multi else result[0]


# --------------------------------------------------------------------------
# dense primitives

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shapes(prim: str, a: np.ndarray, b: np.ndarray):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{prim}: shapes {a.shape} and {b.shape} do not conform") from None


def _add_fwd(a, b):
    _broadcast_shapes("add", a, b)
    return a + b, (a.shape, b.shape)


def _add_bwd(saved, gouts):
    sa, sb = saved
    (g,) = gouts
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _sub_fwd(a, b):
    _broadcast_shapes("sub", a, b)
    return a - b, (a.shape, b.shape)


def _sub_bwd(saved, gouts):
    sa, sb = saved
    (g,) = gouts
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def _mul_fwd(a, b):
    _broadcast_shapes("mul", a, b)
    return a * b, (a, b)


def _mul_bwd(saved, gouts):
    a, b = saved
    (g,) = gouts
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _div_fwd(a, b):
    _broadcast_shapes("div", a, b)
    out = a / b
    return out, (a, b, out)


def _div_bwd(saved, gouts):
    a, b, out = saved
    (g,) = gouts
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


def _matvec_fwd(m, v):
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"matvec: shapes {m.shape} and {v.shape} do not conform")
    return m @ v, (m, v)


def _matvec_bwd(saved, gouts):
    m, v = saved
    (g,) = gouts
    return np.outer(g, v), m.T @ g


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return a @ b, (a, b)


def _matmul_bwd(saved, gouts):
    a, b = saved
    (g,) = gouts
    return g @ b.T, a.T @ g


def _relu_fwd(x):
    return np.maximum(x, 0.0), x > 0.0


def _relu_bwd(mask, gouts):
    return (gouts[0] * mask,)


def _tanh_fwd(x):
    y = np.tanh(x)
    return y, y


def _tanh_bwd(y, gouts):
    return (gouts[0] * (1.0 - y * y),)


def _sum_fwd(x):
    return np.asarray(x.sum()), x.shape


def _sum_bwd(shape, gouts):
    return (np.broadcast_to(gouts[0], shape).copy(),)


def _square_fwd(x):
    return x * x, x


def _square_bwd(x, gouts):
    return (2.0 * x * gouts[0],)


def _concat_fwd(*xs):
    parts = [np.atleast_1d(x) for x in xs]
    for p in parts:
        if p.ndim != 1:
            raise ValueError(f"concat: expected vectors or scalars, got shape {p.shape}")
    return np.concatenate(parts), [x.shape for x in xs]


def _concat_bwd(shapes, gouts):
    (g,) = gouts
    out, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        out.append(g[pos:pos + n].reshape(shape))
        pos += n
    return out


def _slice_fwd(x, start: int, stop: int):
    if x.ndim < 1 or not 0 <= start <= stop <= x.shape[0]:
        raise ValueError(f"slice: [{start}:{stop}] out of range for shape {x.shape}")
    return x[start:stop].copy(), (x.shape, start, stop)


def _slice_bwd(saved, gouts):
    shape, start, stop = saved
    g = np.zeros(shape)
    g[start:stop] = gouts[0]
    return (g,)


def _squeeze_fwd(x):
    if x.size != 1:
        raise ValueError(f"squeeze: expected a single element, got shape {x.shape}")
    return x.reshape(()), x.shape


def _squeeze_bwd(shape, gouts):
    return (gouts[0].reshape(shape),)


def _rot(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _rotate2d_fwd(v, theta):
    if v.shape != (2,) or np.ndim(theta) != 0:
        raise ValueError(f"rotate2d: expected a 2-vector and a scalar, got {v.shape}, {np.shape(theta)}")
    r = _rot(theta)
    out = r @ v
    return out, (r, v, out)


def _rotate2d_bwd(saved, gouts):
    r, v, out = saved
    (g,) = gouts
    # d(Rv)/dtheta = R(theta + pi/2) v = (-out_y, out_x)
    gtheta = -g[0] * out[1] + g[1] * out[0]
    return r.T @ g, np.asarray(gtheta)


def _wrap_fwd(x):
    inside = (x > -np.pi) & (x <= np.pi)
    return np.where(inside, x, np.pi - np.mod(np.pi - x, 2.0 * np.pi)), None


def _wrap_bwd(_, gouts):
    return (gouts[0],)


for _name, _f, _b in [
    ("add", _add_fwd, _add_bwd),
    ("sub", _sub_fwd, _sub_bwd),
    ("mul", _mul_fwd, _mul_bwd),
    ("div", _div_fwd, _div_bwd),
    ("matvec", _matvec_fwd, _matvec_bwd),
    ("matmul", _matmul_fwd, _matmul_bwd),
    ("relu", _relu_fwd, _relu_bwd),
    ("tanh", _tanh_fwd, _tanh_bwd),
    ("sum", _sum_fwd, _sum_bwd),
    ("square", _square_fwd, _square_bwd),
    ("concat", _concat_fwd, _concat_bwd),
    ("slice", _slice_fwd, _slice_bwd),
    ("squeeze", _squeeze_fwd, _squeeze_bwd),
    ("rotate2d", _rotate2d_fwd, _rotate2d_bwd),
    ("wrap_angle", _wrap_fwd, _wrap_bwd),
]:
    register_adjoint(CustomAdjoint(_name, _f, _b))


def add(a, b):
    return record("add", a, b)


def sub(a, b):
    return record("sub", a, b)


def mul(a, b):
    return record("mul", a, b)


def div(a, b):
    return record("div", a, b)


def matvec(m, v):
    return record("matvec", m, v)


def matmul(a, b):
    return record("matmul", a, b)


def relu(x):
    return record("relu", x)


def tanh(x):
    return record("tanh", x)


def sum(x):  # noqa: A001 - mirrors the primitive name
    return record("sum", x)


def square(x):
    return record("square", x)


def concat(*xs):
    return record("concat", *xs)


def slice(x, start: int, stop: int):  # noqa: A001
    return record("slice", x, start=start, stop=stop)


def rotate2d(v, theta):
    """Rotate 2-vector ``v`` counter-clockwise by ``theta`` radians."""
    return record("rotate2d", v, theta)


def wrap_angle(x):
    """Map an angle into (-pi, pi]; the derivative is 1 everywhere."""
    return record("wrap_angle", x)


def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative error of the taped gradient of ``fn`` against central differences.

    The error per coordinate is ``|a - n| / max(|a|, |n|, 1e-12)``. Raises
    ``FloatingPointError`` naming every coordinate where ``fn`` is not finite
    at a perturbed point.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(point, dtype=np.float64)
    tape = Tape()
    leaf = tape.leaf(x0)
    (analytic,) = tape.gradient(fn(leaf), [leaf])

    numeric = np.zeros_like(x0)
    bad = []
    flat = numeric.reshape(-1)
    for k in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[k] += eps
        xm[k] -= eps
        fp = float(fn(Tensor(xp.reshape(x0.shape))).value)
        fm = float(fn(Tensor(xm.reshape(x0.shape))).value)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bad.append(tuple(int(i) for i in np.unravel_index(k, x0.shape)) if x0.ndim else ())
            continue
        flat[k] = (fp - fm) / (2.0 * eps)
    if bad:
        raise FloatingPointError(f"non-finite function values at coordinates {bad}")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0


def directional_check(fn: Callable[[Tensor], Tensor], point, direction=None, eps: float = 1e-5,
                      seed: int = 0) -> float:
    """Relative error of ``<grad fn, d>`` against a central difference along ``d``.

    Cheaper than :func:`grad_check` for large inputs and insensitive to
    round-off at coordinates whose partial derivative is tiny. ``direction``
    defaults to a random unit vector.
    """
    x0 = np.array(point, dtype=np.float64)
    if direction is None:
        direction = np.random.default_rng(seed).standard_normal(x0.shape)
    d = np.asarray(direction, dtype=np.float64)
    d = d / max(float(np.linalg.norm(d)), 1e-300)
    tape = Tape()
    leaf = tape.leaf(x0)
    (g,) = tape.gradient(fn(leaf), [leaf])
    analytic = float(np.sum(g * d))
    fp = float(fn(Tensor(x0 + eps * d)).value)
    fm = float(fn(Tensor(x0 - eps * d)).value)
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise FloatingPointError("non-finite function values along the check direction")
    numeric = (fp - fm) / (2.0 * eps)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
