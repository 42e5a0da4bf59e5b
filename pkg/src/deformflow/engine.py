"""Differentiable computation engine.

Reverse-mode autodiff over numpy arrays with a recording tape, plus the
central finite-difference stencils used for every spatial/temporal
derivative that appears inside residuals.  Parameter gradients are exact;
stencil evaluations are recorded on the tape like any other field
evaluation, so gradients flow through the numerical derivatives.

All arithmetic is float64: the residual losses are stiff near t -> 0 and
32-bit precision fails the oracle checks.
"""

from dataclasses import dataclass, field

import numpy as np


class EngineError(Exception):
    pass


class UnsupportedPrimitiveError(EngineError):
    """A primitive outside the supported set was requested."""


class NonFiniteError(EngineError):
    """A non-finite value appeared in the computation graph."""


SUPPORTED_PRIMITIVES = frozenset(
    {
        "leaf", "add", "sub", "mul", "div", "neg", "pow", "exp", "log", "log1p",
        "abs", "swish", "sum", "mean", "matmul", "reshape", "slice", "take_rows",
        "tile_rows", "concat_rows", "ensemble", "energy", "energy_grad",
        "div_stencil", "grad_stencil", "lap_stencil", "diffusion_dt",
        "diffusion_gradf", "rk4",
    }
)

_CHECK_FINITE = True


def _as_value(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Node:
    """One recorded value in a Tape."""

    __slots__ = ("value", "grad", "op", "parents", "tape", "idx", "_vjps", "_fwd")

    def __init__(self, tape, value, op, parents, vjps, fwd):
        if op not in SUPPORTED_PRIMITIVES:
            raise UnsupportedPrimitiveError(f"unsupported primitive: {op}")
        self.value = _as_value(value)
        if _CHECK_FINITE and not np.all(np.isfinite(self.value)):
            raise NonFiniteError(f"non-finite value at node #{len(tape.nodes)} (op={op})")
        self.grad = None
        self.op = op
        self.parents = parents
        self.tape = tape
        self.idx = len(tape.nodes)
        self._vjps = vjps  # one callable per parent: g -> gradient contribution
        self._fwd = fwd    # recomputes value from parent values (replay)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar (used heavily by losses and tests)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        raise UnsupportedPrimitiveError("generic indexing; use take_rows/slice1d")

    def __repr__(self):
        return f"Node(#{self.idx}, op={self.op}, shape={self.value.shape})"


class Tape:
    """Single-owner recording of primitive operations.

    Creation order is a topological order, so the backward pass is a single
    reverse sweep that visits each node exactly once.
    """

    def __init__(self):
        self.nodes = []

    def leaf(self, value):
        return Node(self, value, "leaf", (), (), None)

    def param(self, store):
        return self.leaf(store.values)

    def backward(self, root):
        """Seed d(root)=1 and sweep; returns nothing, grads live on nodes."""
        if root.tape is not self:
            raise EngineError("root belongs to a different tape")
        for n in self.nodes:
            n.grad = None
        root.grad = np.ones_like(root.value)
        for n in reversed(self.nodes[: root.idx + 1]):
            if n.grad is None:
                continue
            if not n.parents:
                continue
            if n._vjps is None:
                raise UnsupportedPrimitiveError(f"no backward rule for op: {n.op}")
            g = n.grad
            if _CHECK_FINITE and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient at node #{n.idx} (op={n.op})")
            for parent, vjp in zip(n.parents, n._vjps):
                if vjp is not None:
                    parent._accum(vjp(g))

    def replay(self, root=None):
        """Recompute forward values from the leaves; returns the root's value.

        Used to verify the tape invariant: replaying reproduces the recorded
        output bit-identically.
        """
        vals = {}
        out = None
        for n in self.nodes:
            if not n.parents:
                vals[n.idx] = n.value
            else:
                vals[n.idx] = n._fwd(*[vals[p.idx] for p in n.parents])
            out = vals[n.idx]
        if root is not None:
            return vals[root.idx]
        return out


def _node_of(x):
    return isinstance(x, Node)


def _val(x):
    return x.value if _node_of(x) else _as_value(x)


def _record(tape, value, op, parents_and_vjps, fwd):
    parents = tuple(p for p, _ in parents_and_vjps if _node_of(p))
    vjps = tuple(v for p, v in parents_and_vjps if _node_of(p))
    return Node(tape, value, op, parents, vjps, fwd)


def _tape_of(*xs):
    for x in xs:
        if _node_of(x):
            return x.tape
    return None


# ---------------------------------------------------------------------------
# primitive ops (each works on Node or plain array inputs)
# ---------------------------------------------------------------------------

def add(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av + bv
    if t is None:
        return out
    return _record(
        t, out, "add",
        [(a, lambda g: _unbroadcast(g, av.shape)), (b, lambda g: _unbroadcast(g, bv.shape))],
        _fwd_binary(a, b, np.add),
    )


def _fwd_binary(a, b, fn):
    if _node_of(a) and _node_of(b):
        return lambda x, y: fn(x, y)
    if _node_of(a):
        bv = _val(b)
        return lambda x: fn(x, bv)
    av = _val(a)
    return lambda y: fn(av, y)


def sub(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av - bv
    if t is None:
        return out
    return _record(
        t, out, "sub",
        [(a, lambda g: _unbroadcast(g, av.shape)), (b, lambda g: _unbroadcast(-g, bv.shape))],
        _fwd_binary(a, b, np.subtract),
    )


def mul(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av * bv
    if t is None:
        return out
    return _record(
        t, out, "mul",
        [(a, lambda g: _unbroadcast(g * bv, av.shape)), (b, lambda g: _unbroadcast(g * av, bv.shape))],
        _fwd_binary(a, b, np.multiply),
    )


def div(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av / bv
    if t is None:
        return out
    return _record(
        t, out, "div",
        [
            (a, lambda g: _unbroadcast(g / bv, av.shape)),
            (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
        ],
        _fwd_binary(a, b, np.divide),
    )


def neg(a):
    if not _node_of(a):
        return -_val(a)
    return _record(a.tape, -a.value, "neg", [(a, lambda g: -g)], lambda x: -x)


def power(a, p):
    p = float(p)
    if not _node_of(a):
        return _val(a) ** p
    av = a.value
    return _record(
        a.tape, av ** p, "pow",
        [(a, lambda g: g * p * av ** (p - 1.0))],
        lambda x: x ** p,
    )


def exp(a):
    if not _node_of(a):
        return np.exp(_val(a))
    out = np.exp(a.value)
    return _record(a.tape, out, "exp", [(a, lambda g: g * out)], np.exp)


def log(a):
    if not _node_of(a):
        return np.log(_val(a))
    av = a.value
    return _record(a.tape, np.log(av), "log", [(a, lambda g: g / av)], np.log)


def log1p(a):
    if not _node_of(a):
        return np.log1p(_val(a))
    av = a.value
    return _record(a.tape, np.log1p(av), "log1p", [(a, lambda g: g / (1.0 + av))], np.log1p)


def absolute(a):
    if not _node_of(a):
        return np.abs(_val(a))
    av = a.value
    return _record(a.tape, np.abs(av), "abs", [(a, lambda g: g * np.sign(av))], np.abs)


def swish(a):
    """x * sigmoid(x), the repository's only nonlinearity."""
    if not _node_of(a):
        av = _val(a)
        return av / (1.0 + np.exp(-av))
    av = a.value
    s = 1.0 / (1.0 + np.exp(-av))
    return _record(
        a.tape, av * s, "swish",
        [(a, lambda g: g * (s * (1.0 + av * (1.0 - s))))],
        lambda x: x * (1.0 / (1.0 + np.exp(-x))),
    )


def sum_(a, axis=None):
    if not _node_of(a):
        return np.sum(_val(a), axis=axis)
    av = a.value

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), av.shape).copy()

    return _record(a.tape, np.sum(av, axis=axis), "sum", [(a, vjp)], lambda x: np.sum(x, axis=axis))


def mean_(a, axis=None):
    if not _node_of(a):
        return np.mean(_val(a), axis=axis)
    av = a.value
    n = av.size if axis is None else av.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, av.shape).copy()
        return np.broadcast_to(np.expand_dims(g / n, axis), av.shape).copy()

    return _record(a.tape, np.mean(av, axis=axis), "mean", [(a, vjp)], lambda x: np.mean(x, axis=axis))


def matmul(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av @ bv
    if t is None:
        return out
    return _record(
        t, out, "matmul",
        [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)],
        _fwd_binary(a, b, np.matmul),
    )


def inner_rows(a, b):
    """Row-wise inner product of two (B, n) operands -> (B,)."""
    return sum_(mul(a, b), axis=-1)


def reshape(a, shape):
    if not _node_of(a):
        return _val(a).reshape(shape)
    av = a.value
    return _record(
        a.tape, av.reshape(shape), "reshape",
        [(a, lambda g: g.reshape(av.shape))],
        lambda x: x.reshape(shape),
    )


def slice1d(a, start, stop):
    if not _node_of(a):
        return _val(a)[start:stop]
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        out[start:stop] = g
        return out

    return _record(a.tape, av[start:stop], "slice", [(a, vjp)], lambda x: x[start:stop])


def take_rows(a, start, stop):
    if not _node_of(a):
        return _val(a)[start:stop]
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        out[start:stop] = g
        return out

    return _record(a.tape, av[start:stop], "take_rows", [(a, vjp)], lambda x: x[start:stop])


def tile_rows(a, m):
    """Stack m copies of a (B, n) array into (m*B, n)."""
    if not _node_of(a):
        return np.tile(_val(a), (m, 1))
    av = a.value
    B = av.shape[0]
    return _record(
        a.tape, np.tile(av, (m, 1)), "tile_rows",
        [(a, lambda g: g.reshape(m, B, -1).sum(axis=0))],
        lambda x: np.tile(x, (m, 1)),
    )


def concat_rows(parts):
    """Concatenate (B_i, n) operands along axis 0."""
    if not any(_node_of(p) for p in parts):
        return np.concatenate([_val(p) for p in parts], axis=0)
    t = _tape_of(*parts)
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=0)
    offsets = np.cumsum([0] + [v.shape[0] for v in vals])
    pv = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]
        pv.append((p, lambda g, lo=lo, hi=hi: g[lo:hi]))
    node_idx = [i for i, p in enumerate(parts) if _node_of(p)]
    consts = {i: vals[i] for i in range(len(parts)) if i not in node_idx}

    def fwd(*node_vals):
        pieces = []
        it = iter(node_vals)
        for i in range(len(parts)):
            pieces.append(next(it) if i in node_idx else consts[i])
        return np.concatenate(pieces, axis=0)

    return _record(t, out, "concat_rows", pv, fwd)


def custom(op, value, parents_and_vjps, fwd):
    """Record a primitive with a hand-written VJP (energies, kernels, stencils)."""
    t = _tape_of(*[p for p, _ in parents_and_vjps])
    if t is None:
        return _as_value(value)
    return _record(t, value, op, parents_and_vjps, fwd)


# ---------------------------------------------------------------------------
# parameter storage
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Slice:
    name: str
    offset: int
    length: int


class ParamStore:
    """Flat float64 parameter vector partitioned into named slices."""

    def __init__(self, values, layout):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.layout = [Slice(s.name, int(s.offset), int(s.length)) if isinstance(s, Slice) else Slice(*s) for s in layout]
        self._validate()
        self._index = {s.name: s for s in self.layout}

    def _validate(self):
        names = [s.name for s in self.layout]
        if len(set(names)) != len(names):
            raise ValueError("slice names must be unique")
        spans = sorted((s.offset, s.offset + s.length) for s in self.layout)
        pos = 0
        for lo, hi in spans:
            if lo != pos:
                raise ValueError("slices must be disjoint and cover the vector")
            pos = hi
        if pos != self.values.size:
            raise ValueError(f"layout covers {pos} values, vector has {self.values.size}")

    @classmethod
    def build(cls, sizes, values=None):
        """sizes: ordered {name: length}; values default to zeros."""
        layout = []
        off = 0
        for name, length in sizes.items():
            layout.append(Slice(name, off, int(length)))
            off += int(length)
        vals = np.zeros(off) if values is None else values
        return cls(vals, layout)

    def bounds(self, name):
        s = self._index[name]
        return s.offset, s.offset + s.length

    def get(self, name):
        lo, hi = self.bounds(name)
        return self.values[lo:hi]

    def set(self, name, arr):
        lo, hi = self.bounds(name)
        self.values[lo:hi] = arr

    def names(self):
        return [s.name for s in self.layout]

    def copy(self):
        return ParamStore(self.values.copy(), self.layout)

    def __len__(self):
        return self.values.size


def slice_of(params, store, name):
    """Named slice of a full parameter vector (Node or array)."""
    lo, hi = store.bounds(name)
    if _node_of(params):
        return slice1d(params, lo, hi)
    return _as_value(params)[lo:hi]


def gradient(loss_fn, store):
    """Exact reverse-mode gradient of a scalar loss at the given parameters.

    loss_fn receives the parameter vector as a Node and must return a scalar
    Node built from supported primitives.
    """
    tape = Tape()
    p = tape.param(store)
    out = loss_fn(p)
    if not _node_of(out):
        raise EngineError("loss did not depend on the parameters")
    if out.value.ndim != 0 and out.value.size != 1:
        raise EngineError("loss must be scalar")
    tape.backward(out)
    g = p.grad if p.grad is not None else np.zeros_like(store.values)
    return float(out.value), g


# ---------------------------------------------------------------------------
# finite-difference stencils
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FDConfig:
    """Step sizes for the numerical derivatives inside residuals.

    h_space is scaled per point by max(1, |x|_inf) when scale_space is set
    (the default); h_time is used as-is, with one-sided stencils within
    h_time of the endpoints of [0, 1].
    """

    h_space: float = 1e-3
    h_time: float = 1e-3
    scale_space: bool = True

    def __post_init__(self):
        if self.h_space <= 0:
            raise ValueError("h_space must be > 0")
        if self.h_time <= 0:
            raise ValueError("h_time must be > 0")

    def space_step(self, x):
        """Per-sample stencil step, shape (B,)."""
        xv = np.atleast_2d(_val(x))
        if not self.scale_space:
            return np.full(xv.shape[0], self.h_space)
        return self.h_space * np.maximum(1.0, np.max(np.abs(xv), axis=1))


def space_stencil_stack(x, h, include_center=False):
    """Rows [center?; +h e1; -h e1; +h e2; -h e2; ...] for a (B, n) batch.

    h is a per-sample (B,) step.  Returns (stack, n_blocks).
    """
    xv = _val(x)
    B, n = xv.shape
    blocks = 2 * n + (1 if include_center else 0)
    offs = np.zeros((blocks, B, n))
    base = 1 if include_center else 0
    for i in range(n):
        offs[base + 2 * i, :, i] = h
        offs[base + 2 * i + 1, :, i] = -h
    stack = add(tile_rows(x, blocks), offs.reshape(blocks * B, n))
    return stack, blocks


def _check_field_finite(vals, what):
    if not np.all(np.isfinite(vals)):
        bad = np.argwhere(~np.isfinite(vals))
        raise NonFiniteError(f"non-finite {what} at stencil entry {tuple(bad[0])}")


def div_from_stencil(y, n_dim, h, include_center=False):
    """Divergence from a field evaluated on a space_stencil_stack.

    y: (blocks*B, n_dim) stencil-stack field values; returns (B,).
    """
    yv = _val(y)
    base = 1 if include_center else 0
    B = yv.shape[0] // (2 * n_dim + base)
    inv = 1.0 / (2.0 * h)

    def compute(vals):
        out = np.zeros(B)
        for i in range(n_dim):
            p = vals[(base + 2 * i) * B : (base + 2 * i + 1) * B, i]
            m = vals[(base + 2 * i + 1) * B : (base + 2 * i + 2) * B, i]
            out += (p - m) * inv
        return out

    val = compute(yv)
    if not _node_of(y):
        return val

    def vjp(g):
        out = np.zeros_like(yv)
        gi = g * inv
        for i in range(n_dim):
            out[(base + 2 * i) * B : (base + 2 * i + 1) * B, i] = gi
            out[(base + 2 * i + 1) * B : (base + 2 * i + 2) * B, i] = -gi
        return out

    return custom("div_stencil", val, [(y, vjp)], compute)


def grad_from_stencil(y, n_dim, h, include_center=False):
    """Spatial gradient of a scalar field evaluated on a stencil stack.

    y: (blocks*B,) values; returns (B, n_dim).
    """
    yv = _val(y)
    base = 1 if include_center else 0
    B = yv.shape[0] // (2 * n_dim + base)
    inv = 1.0 / (2.0 * h)

    def compute(vals):
        out = np.empty((B, n_dim))
        for i in range(n_dim):
            p = vals[(base + 2 * i) * B : (base + 2 * i + 1) * B]
            m = vals[(base + 2 * i + 1) * B : (base + 2 * i + 2) * B]
            out[:, i] = (p - m) * inv
        return out

    val = compute(yv)
    if not _node_of(y):
        return val

    def vjp(g):
        out = np.zeros_like(yv)
        for i in range(n_dim):
            out[(base + 2 * i) * B : (base + 2 * i + 1) * B] = g[:, i] * inv
            out[(base + 2 * i + 1) * B : (base + 2 * i + 2) * B] = -g[:, i] * inv
        return out

    return custom("grad_stencil", val, [(y, vjp)], compute)


def lap_from_stencil(y, n_dim, h):
    """Laplacian via per-coordinate second differences; stack must include center."""
    yv = _val(y)
    B = yv.shape[0] // (2 * n_dim + 1)
    inv = 1.0 / (h * h)

    def compute(vals):
        c = vals[:B]
        out = np.zeros(B)
        for i in range(n_dim):
            p = vals[(1 + 2 * i) * B : (1 + 2 * i + 1) * B]
            m = vals[(1 + 2 * i + 1) * B : (1 + 2 * i + 2) * B]
            out += (p + m - 2.0 * c) * inv
        return out

    val = compute(yv)
    if not _node_of(y):
        return val

    def vjp(g):
        out = np.zeros_like(yv)
        gi = g * inv
        out[:B] = -2.0 * n_dim * gi
        for i in range(n_dim):
            out[(1 + 2 * i) * B : (1 + 2 * i + 1) * B] = gi
            out[(1 + 2 * i + 1) * B : (1 + 2 * i + 2) * B] = gi
        return out

    return custom("lap_stencil", val, [(y, vjp)], compute)


def fd_divergence(V, x, cfg=None):
    """Central-difference divergence of a vector field at fixed time.

    V maps a (rows, n) batch to (rows, n) values; exact for fields affine
    in x.  x may be one point (n,) or a batch (B, n).
    """
    cfg = cfg or FDConfig()
    single = _val(x).ndim == 1
    xb = reshape(x, (1, -1)) if single and _node_of(x) else (np.atleast_2d(_val(x)) if single else x)
    n = _val(xb).shape[1]
    h = cfg.space_step(xb)
    stack, _ = space_stencil_stack(xb, h)
    y = V(stack)
    if not _node_of(y):
        _check_field_finite(_val(y), "field value")
    out = div_from_stencil(y, n, h)
    if single and not _node_of(out):
        return float(out[0])
    return out


def fd_space_grad(f, x, cfg=None):
    """Central-difference gradient of a scalar field at fixed time."""
    cfg = cfg or FDConfig()
    single = _val(x).ndim == 1
    xb = reshape(x, (1, -1)) if single and _node_of(x) else (np.atleast_2d(_val(x)) if single else x)
    n = _val(xb).shape[1]
    h = cfg.space_step(xb)
    stack, _ = space_stencil_stack(xb, h)
    y = f(stack)
    if not _node_of(y):
        _check_field_finite(_val(y), "field value")
    out = grad_from_stencil(y, n, h)
    if single:
        out = reshape(out, (-1,)) if _node_of(out) else out[0]
    return out


def fd_laplacian(f, x, cfg=None):
    """Laplacian via central second differences, one stencil per coordinate."""
    cfg = cfg or FDConfig()
    single = _val(x).ndim == 1
    xb = reshape(x, (1, -1)) if single and _node_of(x) else (np.atleast_2d(_val(x)) if single else x)
    n = _val(xb).shape[1]
    h = cfg.space_step(xb)
    stack, _ = space_stencil_stack(xb, h, include_center=True)
    y = f(stack)
    if not _node_of(y):
        _check_field_finite(_val(y), "field value")
    out = lap_from_stencil(y, n, h)
    if single and not _node_of(out):
        return float(out[0])
    return out


def time_stencil(t, h):
    """Evaluation times and weights for d/dt at t in [0, 1].

    Central differences at interior t; second-order one-sided stencils
    within h of the endpoints.  Returns (times, coeffs) with
    d/dt f ~= sum_j coeffs[j] * f(times[j]).
    """
    if t - h >= 0.0 and t + h <= 1.0:
        return (t + h, t - h), (0.5 / h, -0.5 / h)
    if t - h < 0.0:
        return (t, t + h, t + 2 * h), (-1.5 / h, 2.0 / h, -0.5 / h)
    return (t, t - h, t - 2 * h), (1.5 / h, -2.0 / h, 0.5 / h)


def time_stencil3(t, h):
    """time_stencil in a uniform 3-point form with times[0] = t."""
    if t - h >= 0.0 and t + h <= 1.0:
        return (t, t + h, t - h), (0.0, 0.5 / h, -0.5 / h)
    if t - h < 0.0:
        return (t, t + h, t + 2 * h), (-1.5 / h, 2.0 / h, -0.5 / h)
    return (t, t - h, t - 2 * h), (1.5 / h, -2.0 / h, 0.5 / h)


def fd_time_partial(f, t, cfg=None):
    """Central (or one-sided near 0/1) difference of a scalar field in time.

    f maps a time in [0, 1] to a scalar or array; all evaluations share x.
    """
    cfg = cfg or FDConfig()
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    times, coeffs = time_stencil(t, cfg.h_time)
    out = None
    for tau, c in zip(times, coeffs):
        y = f(tau)
        if not _node_of(y):
            _check_field_finite(_val(y), "field value")
        term = mul(y, c)
        out = term if out is None else add(out, term)
    return out
