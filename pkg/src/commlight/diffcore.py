"""Minimal reverse-mode differentiation engine on 64-bit numpy arrays.

The engine is deliberately small: it implements exactly the primitive
closure needed by the recurrent value networks, the gated message
machinery, and the training losses, plus two structural ops (reshape,
row gather) used to batch (episode, agent) rows. Every primitive
records onto an explicit tape; the reverse sweep walks the tape
backwards, so topological order is insertion order by construction.

A tape built with ``record=False`` evaluates the same arithmetic
without keeping records; rollouts use that mode so the value a policy
saw and the value the training unroll recomputes come from one code
path.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ParameterSet",
    "DiffcoreError",
    "ShapeMismatch",
    "NonFiniteValue",
    "primitive_forward",
    "backward",
    "finite_difference_check",
    "finite_difference_check_params",
    "gru_cell",
    "gru_param_shapes",
    "PRIMITIVE_IDS",
]


class DiffcoreError(Exception):
    """Base class for engine contract violations."""


class ShapeMismatch(DiffcoreError):
    """Inputs incompatible with a primitive's shape rule."""


class NonFiniteValue(DiffcoreError):
    """A primitive produced NaN or Inf."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A 64-bit real array, either a leaf or the output of a tape record."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = _as_array(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValue("tensor holds non-finite entries")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Ordered record of primitive applications.

    Each record holds (op id, input tensors, output tensor, vjp); the
    vjp closes over the forward values the reverse sweep needs. With
    ``record=False`` the tape only evaluates.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.records: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []

    # -- bookkeeping ----------------------------------------------------

    def _emit(self, op_id: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
              vjp: Callable) -> Tensor:
        if not np.all(np.isfinite(out_data)):
            raise NonFiniteValue(f"primitive '{op_id}' produced non-finite output")
        out = Tensor.__new__(Tensor)
        out.data = out_data
        if self.record:
            self.records.append((op_id, inputs, out, vjp))
        return out

    def leaf(self, data) -> Tensor:
        """Wrap raw data as a constant leaf (no record)."""
        return Tensor(data)

    # -- elementwise arithmetic -----------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        try:
            out = a.data + b.data
        except ValueError as e:
            raise ShapeMismatch(f"add: {a.shape} + {b.shape}") from e
        ash, bsh = a.shape, b.shape
        return self._emit("add", (a, b), out,
                          lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        try:
            out = a.data * b.data
        except ValueError as e:
            raise ShapeMismatch(f"mul: {a.shape} * {b.shape}") from e
        ad, bd = a.data, b.data
        ash, bsh = a.shape, b.shape
        return self._emit("mul", (a, b), out,
                          lambda g: (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh)))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        """a - b, composed from the closure (add + mul by -1)."""
        return self.add(a, self.mul(b, self.leaf(-1.0)))

    def scale(self, a: Tensor, s: float) -> Tensor:
        """a * scalar constant, sugar over mul."""
        return self.mul(a, self.leaf(float(s)))

    # -- linear algebra ---------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
            raise ShapeMismatch("matmul supports 1-D/2-D operands only")
        try:
            out = a.data @ b.data
        except ValueError as e:
            raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from e
        ad, bd = a.data, b.data

        def vjp(g):
            if ad.ndim == 2 and bd.ndim == 2:
                return g @ bd.T, ad.T @ g
            if ad.ndim == 2 and bd.ndim == 1:
                return np.outer(g, bd), ad.T @ g
            if ad.ndim == 1 and bd.ndim == 2:
                return g @ bd.T, np.outer(ad, g)
            return g * bd, g * ad  # 1-D dot product

        return self._emit("matmul", (a, b), out, vjp)

    def affine(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        """x @ w + b with w of shape (in, out) and b of shape (out,)."""
        if w.data.ndim != 2 or b.data.ndim != 1 or w.shape[1] != b.shape[0]:
            raise ShapeMismatch(f"affine: w {w.shape}, b {b.shape}")
        if x.shape[-1] != w.shape[0]:
            raise ShapeMismatch(f"affine: x {x.shape} @ w {w.shape}")
        out = x.data @ w.data + b.data
        xd, wd = x.data, w.data

        def vjp(g):
            gx = g @ wd.T
            if xd.ndim == 1:
                gw = np.outer(xd, g)
                gb = g.copy()
            else:
                x2 = xd.reshape(-1, xd.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                gw = x2.T @ g2
                gb = g2.sum(axis=0)
            return gx, gw, gb

        return self._emit("affine", (x, w, b), out, vjp)

    # -- shape plumbing ---------------------------------------------------

    def concat(self, parts: Sequence[Tensor], axis: int = -1) -> Tensor:
        parts = tuple(parts)
        try:
            out = np.concatenate([p.data for p in parts], axis=axis)
        except ValueError as e:
            raise ShapeMismatch("concat: incompatible shapes") from e
        sizes = [p.data.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        return self._emit("concat", parts, out,
                          lambda g: tuple(np.split(g, splits, axis=axis)))

    def slice(self, x: Tensor, axis: int, start: int, stop: int) -> Tensor:
        n = x.data.shape[axis]
        if not (0 <= start <= stop <= n):
            raise ShapeMismatch(f"slice [{start}:{stop}] outside axis of length {n}")
        idx = [np.s_[:]] * x.data.ndim
        idx[axis] = np.s_[start:stop]
        idx = tuple(idx)
        out = x.data[idx].copy()
        xsh = x.shape

        def vjp(g):
            gx = np.zeros(xsh)
            gx[idx] = g
            return (gx,)

        return self._emit("slice", (x,), out, vjp)

    def reshape(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        try:
            out = x.data.reshape(shape).copy()
        except ValueError as e:
            raise ShapeMismatch(f"reshape {x.shape} -> {shape}") from e
        xsh = x.shape
        return self._emit("reshape", (x,), out, lambda g: (g.reshape(xsh),))

    def gather_rows(self, x: Tensor, index: np.ndarray) -> Tensor:
        """out[r] = x[index[r]]; index entries of -1 yield zero rows.

        Gradient scatter-adds back, so repeated sources accumulate.
        """
        index = np.asarray(index, dtype=np.int64)
        if x.data.ndim < 1 or index.ndim != 1:
            raise ShapeMismatch("gather_rows wants a 1-D index")
        if index.size and index.max(initial=-1) >= x.data.shape[0]:
            raise ShapeMismatch("gather_rows index out of range")
        valid = index >= 0
        out = np.zeros((index.shape[0],) + x.data.shape[1:])
        out[valid] = x.data[index[valid]]
        xsh = x.shape

        def vjp(g):
            gx = np.zeros(xsh)
            np.add.at(gx, index[valid], g[valid])
            return (gx,)

        return self._emit("gather_rows", (x,), out, vjp)

    # -- nonlinearities ---------------------------------------------------

    def sigmoid(self, x: Tensor) -> Tensor:
        xd = x.data
        out = np.empty_like(xd)
        pos = xd >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        e = np.exp(xd[~pos])
        out[~pos] = e / (1.0 + e)
        return self._emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))

    def tanh(self, x: Tensor) -> Tensor:
        out = np.tanh(x.data)
        return self._emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))

    def exp(self, x: Tensor) -> Tensor:
        out = np.exp(x.data)
        return self._emit("exp", (x,), out, lambda g: (g * out,))

    def log(self, x: Tensor) -> Tensor:
        with np.errstate(divide="raise", invalid="raise"):
            try:
                out = np.log(x.data)
            except FloatingPointError as e:
                raise NonFiniteValue("log of non-positive input") from e
        xd = x.data
        return self._emit("log", (x,), out, lambda g: (g / xd,))

    def abs(self, x: Tensor) -> Tensor:
        out = np.abs(x.data)
        sign = np.sign(x.data)
        return self._emit("abs", (x,), out, lambda g: (g * sign,))

    def softmax(self, x: Tensor) -> Tensor:
        """Softmax along the last axis, stabilized via log-sum-exp."""
        xd = x.data
        m = xd.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(xd - m).sum(axis=-1, keepdims=True))
        out = np.exp(xd - lse)

        def vjp(g):
            dot = (g * out).sum(axis=-1, keepdims=True)
            return (out * (g - dot),)

        return self._emit("softmax", (x,), out, vjp)

    # -- reductions and losses ---------------------------------------------

    def sum(self, x: Tensor, axis: int | None = None) -> Tensor:
        out = x.data.sum(axis=axis)
        xsh = x.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, xsh).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), xsh).copy(),)

        return self._emit("sum", (x,), np.asarray(out, dtype=np.float64), vjp)

    def mean(self, x: Tensor, axis: int | None = None) -> Tensor:
        out = x.data.mean(axis=axis)
        xsh = x.shape
        n = x.data.size if axis is None else x.data.shape[axis]

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g / n, xsh).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis) / n, xsh).copy(),)

        return self._emit("mean", (x,), np.asarray(out, dtype=np.float64), vjp)

    def sqerr(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise squared error (a - b)**2."""
        try:
            d = a.data - b.data
        except ValueError as e:
            raise ShapeMismatch(f"sqerr: {a.shape} vs {b.shape}") from e
        ash, bsh = a.shape, b.shape
        return self._emit("sqerr", (a, b), d * d,
                          lambda g: (_unbroadcast(2.0 * g * d, ash),
                                     _unbroadcast(-2.0 * g * d, bsh)))


# Primitive ids exposed for dispatch and for the gradient-check suite.
PRIMITIVE_IDS = (
    "add", "mul", "matmul", "affine", "concat", "slice", "reshape",
    "gather_rows", "sigmoid", "tanh", "exp", "log", "abs", "softmax",
    "sum", "mean", "sqerr",
)

_UNARY = {"sigmoid", "tanh", "exp", "log", "abs", "softmax", "sum", "mean"}
_BINARY = {"add", "mul", "matmul", "sqerr"}


def primitive_forward(op_id: str, inputs: Sequence[Tensor], tape: Tape | None = None,
                      **kwargs) -> Tensor:
    """Apply a primitive by id, recording on `tape` (a fresh one if None)."""
    if tape is None:
        tape = Tape()
    if op_id not in PRIMITIVE_IDS:
        raise DiffcoreError(f"unknown primitive '{op_id}'")
    fn = getattr(tape, op_id)
    if op_id in _UNARY:
        return fn(inputs[0], **kwargs)
    if op_id in _BINARY:
        return fn(inputs[0], inputs[1], **kwargs)
    if op_id == "affine":
        return fn(inputs[0], inputs[1], inputs[2])
    if op_id == "concat":
        return fn(list(inputs), **kwargs)
    return fn(inputs[0], **kwargs)  # slice / reshape / gather_rows


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss node.

    Returns gradients keyed by ``id(tensor)`` for every tensor reached
    by the sweep, leaves included. Raises if the loss is not scalar or
    never appeared as a tape output.
    """
    if not tape.record:
        raise DiffcoreError("cannot run backward on a non-recording tape")
    if loss.data.ndim != 0:
        raise DiffcoreError(f"loss must be scalar, got shape {loss.shape}")
    if not any(out is loss for _, _, out, _ in tape.records):
        raise DiffcoreError("loss node is not an output on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    for op_id, inputs, out, vjp in reversed(tape.records):
        g = grads.get(id(out))
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            k = id(inp)
            if k in grads:
                grads[k] = grads[k] + gi
            else:
                grads[k] = np.asarray(gi, dtype=np.float64)
    return grads


class ParameterSet:
    """Named tensor registry with a parallel gradient accumulator.

    One registry serves every agent of a role: the networks are shared,
    so a single set of named tensors backs all forward passes.
    """

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, shape: tuple[int, ...], rng: np.random.Generator,
            fan_in: int | None = None) -> Tensor:
        """Register a tensor initialized uniformly in +-1/sqrt(fan_in)."""
        if name in self.tensors:
            raise DiffcoreError(f"duplicate parameter name '{name}'")
        if fan_in is None:
            fan_in = shape[0] if shape else 1
        bound = 1.0 / np.sqrt(max(1, fan_in))
        t = Tensor(rng.uniform(-bound, bound, size=shape))
        self.tensors[name] = t
        self.grads[name] = np.zeros(shape)
        return t

    def add_constant(self, name: str, data) -> Tensor:
        if name in self.tensors:
            raise DiffcoreError(f"duplicate parameter name '{name}'")
        t = Tensor(data)
        self.tensors[name] = t
        self.grads[name] = np.zeros(t.shape)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, tape_grads: dict[int, np.ndarray]) -> None:
        """Add gradients from a backward() result into the accumulators."""
        for name, t in self.tensors.items():
            g = tape_grads.get(id(t))
            if g is not None:
                if g.shape != t.shape:
                    raise ShapeMismatch(f"gradient shape {g.shape} != parameter "
                                        f"shape {t.shape} for '{name}'")
                self.grads[name] += g

    def copy(self) -> "ParameterSet":
        """Deep copy (used for target-network snapshots)."""
        ps = ParameterSet()
        for name, t in self.tensors.items():
            ps.tensors[name] = Tensor(t.data.copy())
            ps.grads[name] = np.zeros(t.shape)
        return ps

    def load_from(self, other: "ParameterSet") -> None:
        """Overwrite values in place from another set with identical names."""
        if self.names() != other.names():
            raise DiffcoreError("parameter sets differ in names")
        for name in self.tensors:
            if self.tensors[name].shape != other.tensors[name].shape:
                raise ShapeMismatch(f"shape mismatch for '{name}'")
            self.tensors[name].data[...] = other.tensors[name].data

    # flat views, used by the finite-difference oracle and the optimizer

    def flat(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self.tensors.values()])

    def flat_coords(self, prefixes: tuple[str, ...]) -> list[int]:
        """Flat-vector indices of every tensor whose name matches a prefix."""
        coords: list[int] = []
        i = 0
        for name, t in self.tensors.items():
            if name.startswith(prefixes):
                coords.extend(range(i, i + t.size))
            i += t.size
        return coords

    def flat_grads(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([self.grads[n].ravel() for n in self.tensors])

    def load_flat(self, v: np.ndarray) -> None:
        i = 0
        for t in self.tensors.values():
            t.data[...] = v[i:i + t.size].reshape(t.shape)
            i += t.size
        if i != v.size:
            raise ShapeMismatch("flat vector length does not match parameter count")


# -- recurrent cell ---------------------------------------------------------

def gru_param_shapes(in_dim: int, hidden: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for gate in ("r", "z", "n"):
        shapes[f"w_{gate}"] = (in_dim, hidden)
        shapes[f"u_{gate}"] = (hidden, hidden)
        shapes[f"b_{gate}"] = (hidden,)
    return shapes


def add_gru_params(params: ParameterSet, prefix: str, in_dim: int, hidden: int,
                   rng: np.random.Generator) -> None:
    for name, shape in gru_param_shapes(in_dim, hidden).items():
        fan = in_dim if name.startswith("w_") else hidden
        params.add(f"{prefix}.{name}", shape, rng, fan_in=fan)


def gru_cell(tape: Tape, x: Tensor, h_prev: Tensor, params: ParameterSet,
             prefix: str) -> Tensor:
    """Standard gated recurrent update; h_next stays inside (-1, 1).

    r = sigmoid(x Wr + h Ur + br)
    z = sigmoid(x Wz + h Uz + bz)
    n = tanh(x Wn + r * (h Un) + bn)
    h' = (1 - z) * n + z * h
    """
    p = lambda s: params[f"{prefix}.{s}"]
    r = tape.sigmoid(tape.add(tape.affine(x, p("w_r"), p("b_r")),
                              tape.matmul(h_prev, p("u_r"))))
    z = tape.sigmoid(tape.add(tape.affine(x, p("w_z"), p("b_z")),
                              tape.matmul(h_prev, p("u_z"))))
    n = tape.tanh(tape.add(tape.affine(x, p("w_n"), p("b_n")),
                           tape.mul(r, tape.matmul(h_prev, p("u_n")))))
    one_minus_z = tape.add(tape.leaf(1.0), tape.scale(z, -1.0))
    return tape.add(tape.mul(one_minus_z, n), tape.mul(z, h_prev))


# -- finite-difference oracle -------------------------------------------------

def finite_difference_check(f: Callable[[Tensor, Tape], Tensor], point: Tensor,
                            step: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    `f` maps (tensor, tape) to a scalar tensor built on that tape. The
    error is max over coordinates of |analytic - central| / max(1, |analytic|).
    """
    if step <= 0:
        raise DiffcoreError("step must be positive")
    tape = Tape()
    x = Tensor(point.data.copy())
    loss = f(x, tape)
    grads = backward(tape, loss)
    analytic = grads.get(id(x), np.zeros(x.shape))

    flat = x.data.ravel()
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(x.data.copy()), Tape(record=False)).item()
        flat[i] = orig - step
        lo = f(Tensor(x.data.copy()), Tape(record=False)).item()
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * step)
    fd = fd.reshape(x.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - fd) / denom)) if flat.size else 0.0


def finite_difference_check_params(loss_fn: Callable[[ParameterSet, Tape], Tensor],
                                   params: ParameterSet, step: float = 1e-5,
                                   coords: Iterable[int] | None = None) -> float:
    """Finite-difference check of a loss over a whole parameter set.

    `loss_fn` maps (params, tape) to a scalar tensor. `coords` limits
    the check to a subset of flat coordinates (all by default).
    """
    tape = Tape()
    loss = loss_fn(params, tape)
    params.zero_grads()
    params.accumulate(backward(tape, loss))
    analytic = params.flat_grads()

    v = params.flat()
    idxs = range(v.size) if coords is None else list(coords)
    worst = 0.0
    for i in idxs:
        orig = v[i]
        v[i] = orig + step
        params.load_flat(v)
        hi = loss_fn(params, Tape(record=False)).item()
        v[i] = orig - step
        params.load_flat(v)
        lo = loss_fn(params, Tape(record=False)).item()
        v[i] = orig
        params.load_flat(v)
        fd = (hi - lo) / (2.0 * step)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
