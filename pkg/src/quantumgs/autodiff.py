"""Reverse-mode automatic differentiation over numpy arrays, plus Adam.

Operations on :class:`Tensor` always compute their forward value. When a
:class:`Tape` is active on the current thread and at least one input takes
part in differentiation, the operation is also appended to the tape together
with a vector-Jacobian product. ``Tape.gradient`` walks the recorded nodes in
reverse creation order, which is a reverse topological order.

Forward evaluation with no active tape records nothing and is safe to run
from several threads at once.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

log = logging.getLogger(__name__)

_state = threading.local()


class AutodiffError(ArithmeticError):
    """Raised when a primitive is evaluated outside its domain."""


def _current_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "_traced")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._traced = False

    # -- conveniences -------------------------------------------------------
    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, k):
        if k == 2:
            return mul(self, self)
        raise NotImplementedError("only squaring is supported")

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    vjp: Callable
    op: str
    index: int


class Tape:
    """Records primitive operations for one reverse pass.

    Use as a context manager; nesting on the same thread is not supported.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._prev = None

    def __enter__(self):
        self._prev = _current_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def gradient(self, output: Tensor, wrt: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``output`` (seeded with ones, or ``seed``) w.r.t. ``wrt``."""
        grads: dict[int, np.ndarray] = {}
        seed = np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=np.float64)
        grads[id(output)] = seed
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not (inp.requires_grad or inp._traced):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        out = []
        for t in wrt:
            g = grads.get(id(t))
            out.append(np.zeros_like(t.value) if g is None else g)
        return out


def no_tape():
    """Context manager that suspends recording on this thread."""

    class _Pause:
        def __enter__(self):
            self.prev = _current_tape()
            _state.tape = None

        def __exit__(self, *exc):
            _state.tape = self.prev
            return False

    return _Pause()


def record(value, inputs: Sequence, vjp: Callable, op: str) -> Tensor:
    """Wrap ``value`` as the output of a primitive.

    ``vjp(g)`` must return one gradient (or ``None``) per entry of ``inputs``.
    This is the hook used for custom nodes such as the quantum circuit.
    """
    out = Tensor(value)
    tape = _current_tape()
    if tape is None:
        return out
    if not any(isinstance(i, Tensor) and (i.requires_grad or i._traced) for i in inputs):
        return out
    out._traced = True
    tape.nodes.append(_Node(out, tuple(inputs), vjp, op, len(tape.nodes)))
    return out


def _node_location(op: str) -> str:
    tape = _current_tape()
    n = len(tape.nodes) if tape is not None else "untraced"
    return f"node #{n} ({op})"


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------

def add(a, b):
    av, bv = _val(a), _val(b)
    return record(av + bv, (a, b), lambda g: (unbroadcast(g, av.shape), unbroadcast(g, bv.shape)), "add")


def sub(a, b):
    av, bv = _val(a), _val(b)
    return record(av - bv, (a, b), lambda g: (unbroadcast(g, av.shape), unbroadcast(-g, bv.shape)), "sub")


def mul(a, b):
    av, bv = _val(a), _val(b)
    return record(av * bv, (a, b),
                  lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)), "mul")


def div(a, b):
    av, bv = _val(a), _val(b)
    if np.any(bv == 0):
        raise AutodiffError(f"division by zero at {_node_location('div')}")
    out = av / bv
    return record(out, (a, b),
                  lambda g: (unbroadcast(g / bv, av.shape), unbroadcast(-g * out / bv, bv.shape)), "div")


def neg(a):
    return record(-_val(a), (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(_val(a))
    return record(out, (a,), lambda g: (g * out,), "exp")


def log_(a):
    av = _val(a)
    if np.any(av <= 0):
        raise AutodiffError(f"log of non-positive value at {_node_location('log')}")
    return record(np.log(av), (a,), lambda g: (g / av,), "log")


def tanh(a):
    out = np.tanh(_val(a))
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def erf(a):
    av = _val(a)
    return record(special.erf(av), (a,), lambda g: (g * _TWO_OVER_SQRT_PI * np.exp(-av * av),), "erf")


def sqrt(a):
    av = _val(a)
    if np.any(av < 0):
        raise AutodiffError(f"sqrt of negative value at {_node_location('sqrt')}")
    out = np.sqrt(av)
    return record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(a):
    out = special.expit(_val(a))
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def abs_(a):
    av = _val(a)
    return record(np.abs(av), (a,), lambda g: (g * np.sign(av),), "abs")


def maximum(a, b):
    """Elementwise max; ties send the gradient to ``a``."""
    av, bv = _val(a), _val(b)
    pick_a = av >= bv
    return record(np.maximum(av, bv), (a, b),
                  lambda g: (unbroadcast(g * pick_a, av.shape), unbroadcast(g * ~pick_a, bv.shape)),
                  "max")


def clip(a, lo=None, hi=None):
    av = _val(a)
    out = np.clip(av, lo, hi)
    inside = np.ones(av.shape, dtype=bool)
    if lo is not None:
        inside &= av >= lo
    if hi is not None:
        inside &= av <= hi
    return record(out, (a,), lambda g: (g * inside,), "clip")


def arccos(a):
    av = _val(a)
    if np.any(np.abs(av) > 1):
        raise AutodiffError(f"arccos outside [-1, 1] at {_node_location('arccos')}")
    denom = np.sqrt(np.maximum(1.0 - av * av, 1e-300))
    return record(np.arccos(av), (a,), lambda g: (-g / denom,), "arccos")


def atan2(y, x):
    yv, xv = _val(y), _val(x)
    r2 = xv * xv + yv * yv
    safe = np.where(r2 > 0, r2, 1.0)
    return record(np.arctan2(yv, xv), (y, x),
                  lambda g: (unbroadcast(g * xv / safe, yv.shape), unbroadcast(-g * yv / safe, xv.shape)),
                  "atan2")


def where(mask, a, b):
    """Select with a constant boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    av, bv = _val(a), _val(b)
    return record(np.where(mask, av, bv), (a, b),
                  lambda g: (unbroadcast(np.where(mask, g, 0.0), av.shape),
                             unbroadcast(np.where(mask, 0.0, g), bv.shape)), "where")


def gelu(a):
    """Exact GeLU, x * (1 + erf(x / sqrt 2)) / 2, as one fused node."""
    av = _val(a)
    cdf = 0.5 * (1.0 + special.erf(av / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * av * av) / math.sqrt(2.0 * math.pi)
    return record(av * cdf, (a,), lambda g: (g * (cdf + av * pdf),), "gelu")


# -- reductions and shape ops ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return record(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def cumsum(a, axis=-1):
    av = _val(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return record(np.cumsum(av, axis=axis), (a,), vjp, "cumsum")


def reshape(a, shape):
    av = _val(a)
    return record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),), "reshape")


def transpose(a, axes=None):
    av = _val(a)
    inv = None if axes is None else np.argsort(axes)
    return record(np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i, j):
    av = _val(a)
    return record(np.swapaxes(av, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def expand_dims(a, axis):
    av = _val(a)
    return record(np.expand_dims(av, axis), (a,), lambda g: (g.reshape(av.shape),), "expand_dims")


def getitem(a, idx):
    av = _val(a)

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return record(av[idx], (a,), vjp, "getitem")


def concat(items: Sequence, axis=0):
    vals = [_val(x) for x in items]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record(np.concatenate(vals, axis=axis), tuple(items), vjp, "concat")


def stack(items: Sequence, axis=0):
    vals = [_val(x) for x in items]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record(np.stack(vals, axis=axis), tuple(items), vjp, "stack")


def matmul(a, b):
    av, bv = _val(a), _val(b)

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if av.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        if bv.ndim == 1:
            gb = gb[..., 0]
        return unbroadcast(ga, av.shape), unbroadcast(gb, bv.shape)

    return record(av @ bv, (a, b), vjp, "matmul")


# -- driver ---------------------------------------------------------------------

def forward_backward(f: Callable[..., Tensor], params: Sequence[Tensor]):
    """Evaluate ``f(*params)`` on a fresh tape; return (value, gradients)."""
    with Tape() as tape:
        out = f(*params)
        grads = tape.gradient(out, params)
    return out.value, grads


# -- Adam -----------------------------------------------------------------------

@dataclass
class ParamGroup:
    name: str
    params: list[Tensor]
    lr: float


@dataclass
class AdamState:
    """Bias-corrected Adam with per-group learning rates."""

    groups: list[ParamGroup]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[list[np.ndarray]] = field(default_factory=list)
    v: list[list[np.ndarray]] = field(default_factory=list)
    skipped: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [[np.zeros_like(p.value) for p in g.params] for g in self.groups]
            self.v = [[np.zeros_like(p.value) for p in g.params] for g in self.groups]

    def all_params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g.params]

    def apply(self, grads: Iterable[np.ndarray]) -> None:
        """Update parameters in place; ``grads`` follows ``all_params()`` order."""
        grads = list(grads)
        self.step += 1
        t = self.step
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        k = 0
        for gi, group in enumerate(self.groups):
            gs = grads[k:k + len(group.params)]
            k += len(group.params)
            if not all(np.all(np.isfinite(g)) for g in gs):
                log.warning("non-finite gradient in group %r at step %d; update skipped", group.name, t)
                self.skipped.append((t, group.name))
                continue
            for pi, (p, g) in enumerate(zip(group.params, gs)):
                m = self.m[gi][pi]
                v = self.v[gi][pi]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                p.value -= group.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(state: AdamState, grads) -> AdamState:
    state.apply(grads)
    return state
