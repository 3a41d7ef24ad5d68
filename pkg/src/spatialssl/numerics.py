"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records primitive operations as they execute; :func:`backward`
sweeps the recording in reverse and accumulates adjoints into a flat gradient
laid out like the tracked :class:`ParamVector`.  :class:`Eval` runs the exact
same primitives without recording, so a tracked and an untracked forward pass
produce bit-identical values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

EPS = 1e-12


class NumericOverflowError(ArithmeticError):
    """A recorded node produced a non-finite value."""


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# parameter container


@dataclass(frozen=True)
class Segment:
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass
class ParamVector:
    """Flat float64 storage with a named segment table."""

    values: np.ndarray
    segments: dict[str, Segment] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        covered = 0
        for name, seg in sorted(self.segments.items(), key=lambda kv: kv[1].offset):
            if seg.offset != covered:
                raise ValueError(f"segment {name!r} at offset {seg.offset}, expected {covered}")
            covered += seg.size
        if covered != self.values.size:
            raise ValueError(f"segments cover {covered} values, array has {self.values.size}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter values must be finite")

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        segments, chunks, offset = {}, [], 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            segments[name] = Segment(offset, tuple(arr.shape))
            chunks.append(arr.reshape(-1))
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, segments)

    @property
    def names(self) -> list[str]:
        return list(self.segments)

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, name: str) -> np.ndarray:
        seg = self.segments[name]
        return self.values[seg.offset:seg.offset + seg.size].reshape(seg.shape)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), dict(self.segments))

    def copy(self) -> "ParamVector":
        return self.with_values(self.values)

    def select(self, names: Iterable[str]) -> "ParamVector":
        return ParamVector.from_arrays({n: self[n] for n in names})

    def same_layout(self, other: "ParamVector") -> bool:
        return self.segments == other.segments

    def layout_json(self) -> dict:
        return {n: {"offset": s.offset, "shape": list(s.shape)} for n, s in self.segments.items()}

    @classmethod
    def from_layout_json(cls, layout: Mapping, values: np.ndarray) -> "ParamVector":
        segments = {n: Segment(int(s["offset"]), tuple(int(d) for d in s["shape"]))
                    for n, s in layout.items()}
        return cls(values, segments)


def ema_update(target: ParamVector, online: ParamVector, m: float) -> ParamVector:
    """Momentum average ``m * target + (1 - m) * online``, elementwise.

    Evaluated as ``target - (1 - m) * (target - online)`` so the gap to the
    online weights contracts by exactly ``m`` up to rounding of the gap itself.
    """
    if not target.same_layout(online):
        raise ValueError("EMA target and online parameters have different segment tables")
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum coefficient must lie in [0, 1], got {m}")
    gap = target.values - online.values
    return target.with_values(target.values - (1.0 - m) * gap)


# --------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("value", "op", "parents", "vjp", "index", "segment")

    def __init__(self, value, op, parents=(), vjp=None, index=-1, segment=None):
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.index = index
        self.segment = segment

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node#{self.index}({self.op}, shape={self.value.shape})"


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Eval:
    """Primitive set evaluated eagerly, nothing recorded."""

    recording = False

    def __init__(self):
        self.nodes: list[Node] = []
        self.flags: list[str] = []
        self.params: ParamVector | None = None

    # -- plumbing ---------------------------------------------------------
    def _emit(self, op: str, value, parents=(), vjp=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        idx = len(self.nodes) if self.recording else -1
        if not np.isfinite(value).all():
            raise NumericOverflowError(f"non-finite value at node {idx} ({op})")
        node = Node(value, op, parents if self.recording else (), vjp if self.recording else None, idx)
        if self.recording:
            self.nodes.append(node)
        return node

    def _node(self, x) -> Node:
        if isinstance(x, Node):
            return x
        return self.const(x)

    def const(self, x) -> Node:
        return self._emit("const", np.array(x, dtype=np.float64))

    def param(self, params: ParamVector, name: str) -> Node:
        return self.const(params[name])

    # -- primitives -------------------------------------------------------
    def add(self, a, b) -> Node:
        a, b = self._node(a), self._node(b)
        sa, sb = a.value.shape, b.value.shape
        return self._emit("add", a.value + b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b) -> Node:
        a, b = self._node(a), self._node(b)
        sa, sb = a.value.shape, b.value.shape
        return self._emit("sub", a.value - b.value, (a, b),
                          lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))

    def mul(self, a, b) -> Node:
        a, b = self._node(a), self._node(b)
        av, bv = a.value, b.value
        return self._emit("mul", av * bv, (a, b),
                          lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def scale(self, a, c: float) -> Node:
        a = self._node(a)
        c = float(c)
        return self._emit("scale", a.value * c, (a,), lambda g: (g * c,))

    def square(self, a) -> Node:
        a = self._node(a)
        av = a.value
        return self._emit("square", av * av, (a,), lambda g: (2.0 * av * g,))

    def matmul(self, a, b) -> Node:
        """``a @ b`` for 1-D or 2-D operands."""
        a, b = self._node(a), self._node(b)
        av, bv = a.value, b.value

        def vjp(g):
            if av.ndim == 1 and bv.ndim == 2:
                return bv @ g, np.outer(av, g)
            if av.ndim == 2 and bv.ndim == 1:
                return np.outer(g, bv), av.T @ g
            if av.ndim == 1 and bv.ndim == 1:
                return g * bv, g * av
            return g @ bv.T, av.T @ g

        return self._emit("matmul", av @ bv, (a, b), vjp)

    def tanh(self, a) -> Node:
        a = self._node(a)
        out = np.tanh(a.value)
        return self._emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))

    def relu(self, a) -> Node:
        a = self._node(a)
        mask = a.value > 0
        return self._emit("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))

    def sum(self, a, axis=None) -> Node:
        a = self._node(a)
        shape = a.value.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return self._emit("sum", a.value.sum(axis=axis), (a,), vjp)

    def mean(self, a, axis=None) -> Node:
        a = self._node(a)
        n = a.value.size if axis is None else a.value.shape[axis]
        return self.scale(self.sum(a, axis=axis), 1.0 / n)

    def reshape(self, a, shape) -> Node:
        a = self._node(a)
        old = a.value.shape
        return self._emit("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def gather(self, a, index) -> Node:
        """Rows of ``a`` selected by integer ``index`` (repeats allowed)."""
        a = self._node(a)
        index = np.asarray(index, dtype=np.intp)
        shape = a.value.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, index, g)
            return (out,)

        return self._emit("gather", a.value[index], (a,), vjp)

    def stack(self, items: Sequence) -> Node:
        nodes = [self._node(x) for x in items]
        n = len(nodes)
        return self._emit("stack", np.stack([x.value for x in nodes]), tuple(nodes),
                          lambda g: tuple(g[i] for i in range(n)))

    def dot(self, a, b) -> Node:
        """Inner product along the last axis."""
        a, b = self._node(a), self._node(b)
        av, bv = a.value, b.value
        out = np.sum(av * bv, axis=-1)
        return self._emit("dot", out, (a, b),
                          lambda g: (np.expand_dims(g, -1) * bv, np.expand_dims(g, -1) * av))

    def norm(self, a) -> Node:
        """Euclidean norm along the last axis; zero gradient below ``EPS``."""
        a = self._node(a)
        av = a.value
        out = np.sqrt(np.sum(av * av, axis=-1))
        small = out <= EPS
        if np.any(small):
            self.flags.append(f"norm at zero vector (node {len(self.nodes)})")
        safe = np.where(small, 1.0, out)

        def vjp(g):
            return (np.where(np.expand_dims(small, -1), 0.0, av * np.expand_dims(g / safe, -1)),)

        return self._emit("norm", out, (a,), vjp)

    def cosine(self, a, b) -> Node:
        """Cosine similarity along the last axis, denominator guarded by ``EPS``."""
        a, b = self._node(a), self._node(b)
        av, bv = a.value, b.value
        na = np.sqrt(np.sum(av * av, axis=-1))
        nb = np.sqrt(np.sum(bv * bv, axis=-1))
        den = na * nb
        guarded = den <= EPS
        if np.any(guarded):
            self.flags.append(f"cosine with zero-norm operand (node {len(self.nodes)})")
        den = np.where(guarded, EPS, den)
        out = np.sum(av * bv, axis=-1) / den

        def vjp(g):
            live = np.expand_dims(np.where(guarded, 0.0, g), -1)
            c = np.expand_dims(out, -1)
            d = np.expand_dims(den, -1)
            na2 = np.expand_dims(np.where(guarded, 1.0, na * na), -1)
            nb2 = np.expand_dims(np.where(guarded, 1.0, nb * nb), -1)
            ga = live * (bv / d - c * av / na2)
            gb = live * (av / d - c * bv / nb2)
            return ga, gb

        return self._emit("cosine", out, (a, b), vjp)


class Tape(Eval):
    """Recording variant of :class:`Eval`.

    Only one :class:`ParamVector` may be tracked per tape; its segments become
    leaves whose adjoints are scattered into the returned flat gradient.
    """

    recording = True

    def param(self, params: ParamVector, name: str) -> Node:
        if self.params is None:
            self.params = params
        elif self.params is not params:
            raise UsageError("a tape tracks a single ParamVector")
        node = self._emit("param", params[name].copy())
        node.segment = name
        return node


def forward_record(f: Callable, params: ParamVector, *args):
    """Run ``f(tape, params, *args)`` on a fresh tape; return (output node, tape)."""
    tape = Tape()
    tape.params = params
    out = f(tape, params, *args)
    return out, tape


def backward(tape: Tape, output: Node, seed=None) -> np.ndarray:
    """Adjoint sweep from ``output``; returns a gradient shaped like the tracked params."""
    if seed is None:
        if output.value.size != 1:
            raise UsageError(f"output has shape {output.value.shape}; pass explicit seed weights")
        seed = np.ones_like(output.value)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.value.shape:
        raise UsageError(f"seed shape {seed.shape} != output shape {output.value.shape}")
    params = tape.params
    grad = np.zeros(len(params) if params is not None else 0)
    if output.index < 0:
        return grad

    adjoints: dict[int, np.ndarray] = {output.index: seed}
    for node in reversed(tape.nodes[:output.index + 1]):
        g = adjoints.pop(node.index, None)
        if g is None:
            continue
        if node.segment is not None:
            seg = params.segments[node.segment]
            grad[seg.offset:seg.offset + seg.size] += g.reshape(-1)
            continue
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent.index < 0 or parent.vjp is None and parent.segment is None:
                continue
            prev = adjoints.get(parent.index)
            adjoints[parent.index] = pg if prev is None else prev + pg
    return grad


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    passed: bool
    checked: int
    flags: list[str]

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        extra = f" flags={self.flags}" if self.flags else ""
        return (f"{state} max_rel_err={self.max_rel_error:.3e} at index {self.worst_index} "
                f"({self.checked} params){extra}")


def grad_check(f: Callable, params: ParamVector, h: float = 1e-5, tol: float = 1e-4,
               indices: Sequence[int] | None = None, floor: float = 1e-8,
               corrupt: int | None = None, order: int = 2) -> GradCheckReport:
    """Compare reverse-mode gradient of scalar ``f(ops, params)`` with central differences.

    ``order`` selects the 3-point (2) or 5-point (4) central stencil.  The
    5-point stencil tolerates a larger ``h``, which keeps cancellation noise
    small when the loss value is large compared to its gradient.

    ``corrupt`` perturbs the analytic gradient at one index; it exists so the
    failure path can be exercised.
    """
    out, tape = forward_record(f, params)
    grad = backward(tape, out)
    if corrupt is not None:
        grad[corrupt] += 1.0 + abs(grad[corrupt])
    flags = list(tape.flags)
    if indices is None:
        indices = range(len(params))
    worst, worst_idx, n = 0.0, -1, 0
    if order not in (2, 4):
        raise UsageError(f"order must be 2 or 4, got {order}")
    base = params.values

    def at(i, step):
        x = base.copy()
        x[i] += step
        return float(f(Eval(), params.with_values(x)).value)

    for i in indices:
        if order == 2:
            fd = (at(i, h) - at(i, -h)) / (2.0 * h)
        else:
            fd = (8.0 * (at(i, h) - at(i, -h)) - (at(i, 2 * h) - at(i, -2 * h))) / (12.0 * h)
        an = float(grad[i])
        diff = abs(an - fd)
        # differences under the absolute floor are finite-difference noise
        err = 0.0 if diff <= floor else diff / max(abs(an), abs(fd), floor)
        if err > worst or worst_idx < 0:
            worst, worst_idx = err, int(i)
        n += 1
    return GradCheckReport(worst, worst_idx, worst < tol, n, flags)
