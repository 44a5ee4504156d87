"""Dense kernels, a reverse-mode tape, seeded RNG streams and a finite-difference oracle.

Every kernel accepts either plain ``numpy`` arrays (evaluated eagerly) or
:class:`Var` handles, in which case the call is recorded on the owning
:class:`Tape`. Matrices are 2-D arrays; a leading batch axis ``(B, rows, cols)``
is allowed everywhere and broadcasts the way ``numpy.matmul`` does, so a
mini-batch of equally segmented sequences runs as one traced graph.

"Rows" always means axis ``-2`` (tokens) and "cols" axis ``-1`` (features).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, ShapeError

PRECISIONS = {"f32": np.float32, "f64": np.float64}

# Per-element FLOP weights for non-matmul primitives. The analytic counters in
# adapters/netmodel are written against the same weights.
SOFTMAX_FLOPS = 4  # subtract max, exp, row-sum, divide
SIGMOID_FLOPS = 4
SILU_FLOPS = SIGMOID_FLOPS + 1


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected f32 or f64") from None
    return np.dtype(precision)


# ---------------------------------------------------------------------------
# RNG


@dataclass(frozen=True)
class RngStream:
    """Counter-based (Philox) stream keyed by ``(seed, stream)``.

    The 128-bit Philox key is ``seed | stream << 64`` so every pair maps to an
    independent, platform-stable sequence.
    """

    seed: int
    stream: int = 0
    algorithm: str = "philox4x64"

    def generator(self) -> np.random.Generator:
        key = (self.seed & 0xFFFFFFFFFFFFFFFF) | ((self.stream & 0xFFFFFFFFFFFFFFFF) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, name: str) -> "RngStream":
        """Derive a named sub-stream; the same name always yields the same stream."""
        tag = zlib.crc32(name.encode("utf-8"))
        return RngStream(self.seed, (self.stream * 0x9E3779B1 + tag) & 0xFFFFFFFFFFFFFFFF)


def kaiming_uniform_init(rows: int, cols: int, rng: RngStream, dtype=np.float64) -> np.ndarray:
    """He-uniform draw for a ``cols -> rows`` map: U(-b, b), b = sqrt(6 / cols)."""
    if rows < 1 or cols < 1:
        raise ContractError(f"kaiming_uniform_init needs positive shape, got ({rows}, {cols})")
    bound = math.sqrt(6.0 / cols)
    draw = rng.generator().uniform(-bound, bound, size=(rows, cols))
    return draw.astype(dtype)


# ---------------------------------------------------------------------------
# Primitive registry


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_matmul(a_shape, b_shape):
    if len(a_shape) < 2 or len(b_shape) < 2 or a_shape[-1] != b_shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a_shape)} x {tuple(b_shape)}")


def _softmax(m: np.ndarray) -> np.ndarray:
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch-free stable logistic.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def _log_softmax(m: np.ndarray) -> np.ndarray:
    z = m - m.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    vjp: Callable
    flops: Callable


def _size(x) -> int:
    return int(np.prod(x.shape))


def _mm_flops(ins, out, attrs):
    return 2 * _size(out) * ins[0].shape[-1]


def _mm_vjp(g, ins, out, attrs, needs):
    a, b = ins
    ga = unbroadcast(g @ _swap(b), a.shape) if needs[0] else None
    gb = unbroadcast(_swap(a) @ g, b.shape) if needs[1] else None
    return ga, gb


def _add_vjp(g, ins, out, attrs, needs):
    return tuple(unbroadcast(g, x.shape) if n else None for x, n in zip(ins, needs))


def _sub_vjp(g, ins, out, attrs, needs):
    a, b = ins
    return (unbroadcast(g, a.shape) if needs[0] else None,
            unbroadcast(-g, b.shape) if needs[1] else None)


def _mul_vjp(g, ins, out, attrs, needs):
    a, b = ins
    return (unbroadcast(g * b, a.shape) if needs[0] else None,
            unbroadcast(g * a, b.shape) if needs[1] else None)


def _softmax_vjp(g, ins, out, attrs, needs):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _slice_fwd(ins, attrs):
    return ins[0][..., attrs["start"]:attrs["stop"], :]


def _slice_vjp(g, ins, out, attrs, needs):
    full = np.zeros_like(ins[0])
    full[..., attrs["start"]:attrs["stop"], :] = g
    return (full,)


def _concat_fwd(ins, attrs):
    return np.concatenate(ins, axis=-2)


def _concat_vjp(g, ins, out, attrs, needs):
    grads, start = [], 0
    for x, n in zip(ins, needs):
        stop = start + x.shape[-2]
        grads.append(g[..., start:stop, :] if n else None)
        start = stop
    return tuple(grads)


def _mean_rows_vjp(g, ins, out, attrs, needs):
    x = ins[0]
    rows = x.shape[-2]
    return (np.broadcast_to(g / rows, x.shape).copy(),)


def _sum_fwd(ins, attrs):
    x = ins[0]
    return np.asarray(x.sum(), dtype=x.dtype).reshape(1, 1)


def _sigmoid_vjp(g, ins, out, attrs, needs):
    return (g * out * (1.0 - out),)


def _silu_fwd(ins, attrs):
    x = ins[0]
    return x * _sigmoid(x)


def _silu_vjp(g, ins, out, attrs, needs):
    x = ins[0]
    s = _sigmoid(x)
    return (g * (s + x * s * (1.0 - s)),)


def _xent_fwd(ins, attrs):
    logits = ins[0]
    labels = attrs["labels"]
    flat = logits.reshape(-1, logits.shape[-1])
    logp = _log_softmax(flat)
    picked = logp[np.arange(flat.shape[0]), labels]
    return np.asarray(-picked.mean(), dtype=logits.dtype).reshape(1, 1)


def _xent_vjp(g, ins, out, attrs, needs):
    logits = ins[0]
    labels = attrs["labels"]
    flat = logits.reshape(-1, logits.shape[-1])
    p = _softmax(flat)
    p[np.arange(flat.shape[0]), labels] -= 1.0
    p *= g.reshape(()) / flat.shape[0]
    return (p.reshape(logits.shape),)


PRIMITIVES: dict[str, Primitive] = {
    p.name: p
    for p in [
        Primitive("matmul", lambda ins, at: ins[0] @ ins[1], _mm_vjp, _mm_flops),
        Primitive("add", lambda ins, at: ins[0] + ins[1], _add_vjp, lambda i, o, a: _size(o)),
        Primitive("sub", lambda ins, at: ins[0] - ins[1], _sub_vjp, lambda i, o, a: _size(o)),
        Primitive("mul", lambda ins, at: ins[0] * ins[1], _mul_vjp, lambda i, o, a: _size(o)),
        Primitive(
            "scale",
            lambda ins, at: ins[0] * ins[0].dtype.type(at["c"]),
            lambda g, ins, o, at, n: (g * ins[0].dtype.type(at["c"]),),
            lambda i, o, a: _size(o),
        ),
        Primitive("transpose", lambda ins, at: _swap(ins[0]),
                  lambda g, ins, o, at, n: (_swap(g),), lambda i, o, a: 0),
        Primitive("softmax_rows", lambda ins, at: _softmax(ins[0]), _softmax_vjp,
                  lambda i, o, a: SOFTMAX_FLOPS * _size(o)),
        Primitive("slice_rows", _slice_fwd, _slice_vjp, lambda i, o, a: 0),
        Primitive("concat_rows", _concat_fwd, _concat_vjp, lambda i, o, a: 0),
        Primitive("mean_rows", lambda ins, at: ins[0].mean(axis=-2, keepdims=True),
                  _mean_rows_vjp, lambda i, o, a: _size(i[0])),
        Primitive("sum", _sum_fwd, lambda g, ins, o, at, n: (np.full_like(ins[0], g.reshape(())),),
                  lambda i, o, a: _size(i[0])),
        Primitive("sigmoid", lambda ins, at: _sigmoid(ins[0]), _sigmoid_vjp,
                  lambda i, o, a: SIGMOID_FLOPS * _size(o)),
        Primitive("silu", _silu_fwd, _silu_vjp, lambda i, o, a: SILU_FLOPS * _size(o)),
        Primitive("cross_entropy", _xent_fwd, _xent_vjp,
                  lambda i, o, a: (SOFTMAX_FLOPS + 2) * _size(i[0])),
    ]
}


def _check_shapes(op: str, shapes: Sequence[tuple], attrs: Mapping) -> None:
    if op == "matmul":
        _check_matmul(*shapes)
    elif op in ("add", "sub", "mul"):
        try:
            np.broadcast_shapes(*shapes)
        except ValueError:
            raise ShapeError(f"{op} shape mismatch: {shapes[0]} vs {shapes[1]}") from None
    elif op == "concat_rows":
        tails = {(s[:-2], s[-1]) for s in shapes}
        if len(tails) > 1:
            raise ShapeError(f"concat_rows needs matching batch/cols, got {list(shapes)}")
    elif op == "slice_rows":
        rows = shapes[0][-2]
        if not 0 <= attrs["start"] <= attrs["stop"] <= rows:
            raise ShapeError(f"slice [{attrs['start']}:{attrs['stop']}) outside {rows} rows")
    elif op == "cross_entropy":
        n = int(np.prod(shapes[0][:-1]))
        if np.shape(attrs["labels"]) != (n,):
            raise ShapeError(f"labels shape {np.shape(attrs['labels'])} != ({n},)")


# ---------------------------------------------------------------------------
# Tape


@dataclass(eq=False)
class Node:
    id: int
    op: str  # "leaf" or a PRIMITIVES key
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    requires_grad: bool = False
    flops: int = 0


class Tape:
    """Ordered record of primitive applications.

    Node ids are assigned in creation order, which is a topological order by
    construction. Values are kept alongside so the backward pass and
    :meth:`replay` need nothing else.
    """

    def __init__(self, dtype="f64", check_finite: bool = True):
        self.dtype = resolve_dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self._params: dict[str, Var] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> "Var":
        arr = np.asarray(value, dtype=self.dtype)
        if arr.ndim < 2:
            raise ShapeError(f"tape values must be at least 2-D, got shape {arr.shape}")
        node = Node(len(self.nodes), "leaf", (), name=name, requires_grad=requires_grad)
        self.nodes.append(node)
        self.values.append(arr)
        return Var(self, node.id)

    def const(self, value, name: str | None = None) -> "Var":
        return self.leaf(value, name=name, requires_grad=False)

    def param(self, name: str, value, trainable: bool = True) -> "Var":
        """Register a named parameter once; later calls return the same leaf."""
        var = self._params.get(name)
        if var is None:
            var = self.leaf(value, name=name, requires_grad=trainable)
            self._params[name] = var
        return var

    @property
    def params(self) -> dict[str, "Var"]:
        return dict(self._params)

    def apply(self, op: str, inputs: Sequence["Var"], **attrs) -> "Var":
        prim = PRIMITIVES[op]
        vals = [self.values[v.id] for v in inputs]
        _check_shapes(op, [v.shape for v in vals], attrs)
        out = prim.forward(vals, attrs)
        if self.check_finite and not np.isfinite(out).all():
            raise FloatingPointError(f"non-finite output from {op}")
        node = Node(
            len(self.nodes),
            op,
            tuple(v.id for v in inputs),
            attrs,
            requires_grad=any(self.nodes[v.id].requires_grad for v in inputs),
            flops=prim.flops(vals, out, attrs),
        )
        self.nodes.append(node)
        self.values.append(out)
        return Var(self, node.id)

    def flop_count(self, start: int = 0) -> int:
        return sum(n.flops for n in self.nodes[start:])

    def replay(self, leaf_values: Mapping[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node from (optionally substituted) leaf values."""
        leaf_values = leaf_values or {}
        vals: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                v = leaf_values.get(node.id)
                vals.append(self.values[node.id] if v is None else np.asarray(v, self.dtype))
            else:
                prim = PRIMITIVES[node.op]
                vals.append(prim.forward([vals[i] for i in node.inputs], node.attrs))
        return vals


def backward(tape: Tape, loss: "Var | int") -> dict[int, np.ndarray]:
    """Reverse sweep from a 1x1 loss node.

    Returns a gradient for every leaf that requires grad, keyed by node id;
    leaves the loss does not depend on get an all-zero array.
    """
    loss_id = loss.id if isinstance(loss, Var) else int(loss)
    if tape.values[loss_id].shape != (1, 1):
        raise ContractError(f"loss must be 1x1, got shape {tape.values[loss_id].shape}")
    grads: dict[int, np.ndarray] = {loss_id: np.ones((1, 1), dtype=tape.dtype)}
    for node in reversed(tape.nodes[: loss_id + 1]):
        g = grads.get(node.id)
        if g is None or node.op == "leaf" or not node.requires_grad:
            continue
        ins = [tape.values[i] for i in node.inputs]
        needs = [tape.nodes[i].requires_grad for i in node.inputs]
        parts = PRIMITIVES[node.op].vjp(g, ins, tape.values[node.id], node.attrs, needs)
        for i, gi in zip(node.inputs, parts):
            if gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    out = {}
    for node in tape.nodes:
        if node.op == "leaf" and node.requires_grad:
            g = grads.get(node.id)
            out[node.id] = np.zeros_like(tape.values[node.id]) if g is None else g
    return out


def param_grads(tape: Tape, loss: "Var") -> dict[str, np.ndarray]:
    """Like :func:`backward` but keyed by parameter name."""
    grads = backward(tape, loss)
    return {name: grads[v.id] for name, v in tape.params.items() if v.id in grads}


# ---------------------------------------------------------------------------
# Var handle and polymorphic kernels


class Var:
    __slots__ = ("tape", "id")
    __array_priority__ = 1000  # keep ndarray <op> Var routed to Var

    def __init__(self, tape: Tape, id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.shape[-2]

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        node = self.tape.nodes[self.id]
        return f"Var(id={self.id}, op={node.op}, shape={self.shape})"


def _run(op: str, *args, **attrs):
    tape = next((a.tape for a in args if isinstance(a, Var)), None)
    if tape is None:
        arrays = [np.asarray(a) for a in args]
        _check_shapes(op, [a.shape for a in arrays], attrs)
        out = PRIMITIVES[op].forward(arrays, attrs)
        if not np.isfinite(out).all():
            raise FloatingPointError(f"non-finite output from {op}")
        return out
    inputs = [a if isinstance(a, Var) else tape.const(a) for a in args]
    return tape.apply(op, inputs, **attrs)


def matmul(a, b):
    """Matrix product; batched operands broadcast over leading axes."""
    return _run("matmul", a, b)


def add(a, b):
    return _run("add", a, b)


def sub(a, b):
    return _run("sub", a, b)


def mul(a, b):
    """Elementwise product with broadcasting (used for gates and row masks)."""
    return _run("mul", a, b)


def scale(a, c: float):
    return _run("scale", a, c=float(c))


def transpose(a):
    return _run("transpose", a)


def softmax_rows(m):
    """Row-wise softmax with per-row max subtraction."""
    return _run("softmax_rows", m)


def slice_rows(a, start: int, stop: int):
    return _run("slice_rows", a, start=int(start), stop=int(stop))


def concat_rows(*parts):
    if len(parts) == 1:
        return parts[0]
    return _run("concat_rows", *parts)


def mean_rows(a):
    return _run("mean_rows", a)


def sum_all(a):
    return _run("sum", a)


def sigmoid(a):
    return _run("sigmoid", a)


def silu(a):
    return _run("silu", a)


def cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label] over every leading position; 1x1."""
    return _run("cross_entropy", logits, labels=np.asarray(labels, dtype=np.int64).reshape(-1))


# ---------------------------------------------------------------------------
# Finite-difference oracle


def fd_gradient(
    f: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central differences ``(f(p+h) - f(p-h)) / 2h`` for every scalar entry.

    ``f`` receives a dict of (perturbed copies of) ``params``.
    """
    if step <= 0:
        raise ContractError("fd step must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f(work))
            flat[i] = orig - step
            down = float(f(work))
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max|a-b| scaled by the larger of max|a|, max|b| (and ``floor``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / denom)
