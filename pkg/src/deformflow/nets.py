"""Trainable objects: RBF-time-kernel weighted sums of MLPs.

Four objects can be parametrized: the transport field V (vector valued),
the interpolation correction f (scalar valued), and the two time-only
heads C and D.  MLP members take only x as input; all time dependence is
carried by the Gaussian kernels in t.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels as kern
from . import engine
from .engine import Node, ParamStore, custom, slice_of

MAGIC = b"DFLOW1"


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    out_dim: int
    hidden_layers: int
    hidden_width: int
    activation: str = "swish"

    def __post_init__(self):
        for f in ("in_dim", "out_dim", "hidden_layers", "hidden_width"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.activation != "swish":
            raise ValueError(f"unsupported activation: {self.activation}")

    @property
    def dims(self):
        return (self.in_dim,) + (self.hidden_width,) * self.hidden_layers + (self.out_dim,)

    @property
    def member_params(self):
        d = self.dims
        return sum((d[i] + 1) * d[i + 1] for i in range(len(d) - 1))


@dataclass(frozen=True)
class RbfTimeEnsemble:
    kernels: int
    mlp: MlpSpec
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kernels < 2:
            raise ValueError("need at least 2 time kernels")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be > 0")

    @property
    def centers(self):
        K = self.kernels
        return np.arange(K) / (K - 1)

    @property
    def ell(self):
        # default: the center spacing, so adjacent kernels overlap at e^{-1/2}
        return self.bandwidth if self.bandwidth is not None else 1.0 / (self.kernels - 1)

    @property
    def param_length(self):
        return self.kernels * self.mlp.member_params


@dataclass(frozen=True)
class TimeScalarHead:
    kernels: int
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kernels < 2:
            raise ValueError("need at least 2 time kernels")

    @property
    def centers(self):
        K = self.kernels
        return np.arange(K) / (K - 1)

    @property
    def ell(self):
        return self.bandwidth if self.bandwidth is not None else 1.0 / (self.kernels - 1)

    @property
    def param_length(self):
        return self.kernels


def kernel_weights(obj, t):
    """Unnormalized Gaussian kernel weights kappa_k(t), shape (K,)."""
    d = t - obj.centers
    return np.exp(-d * d / (2.0 * obj.ell**2))


def kappa_rows(obj, ts, rows_per_block):
    """Per-row kernel-weight matrix for a stack of row blocks at times ts."""
    mats = [np.broadcast_to(kernel_weights(obj, t), (rows_per_block, obj.kernels)) for t in ts]
    return np.concatenate(mats, axis=0)


def ensemble_rows(ens, w, X, kap):
    """Ensemble evaluation on pre-stacked rows with per-row kernel weights.

    w and X may be Nodes; kap is a constant (rows, K) array.
    """
    dims = np.asarray(ens.mlp.dims, dtype=np.int64)
    wv = engine._val(w)
    Xv = engine._val(X)
    val = kern.ensemble_forward(wv, dims, Xv, kap)
    if not isinstance(w, Node) and not isinstance(X, Node):
        return val

    cache = {}

    def _bwd(g):
        if "g" not in cache or cache["g"] is not g:
            cache["g"] = g
            cache["dX"], cache["dw"] = kern.ensemble_backward(wv, dims, Xv, kap, g)
        return cache["dX"], cache["dw"]

    return custom(
        "ensemble", val,
        [(w, lambda g: _bwd(g)[1]), (X, lambda g: _bwd(g)[0])],
        lambda *vals: kern.ensemble_forward(
            vals[0] if isinstance(w, Node) else wv,
            dims,
            (vals[-1] if isinstance(X, Node) else Xv),
            kap,
        ),
    )


def ensemble_eval(ens, w, t, x):
    """Sum_k kappa_k(t) MLP_k(x) at a single time; x is (n,) or (B, n)."""
    xv = engine._val(x)
    single = xv.ndim == 1
    xb = engine.reshape(x, (1, -1)) if (single and isinstance(x, Node)) else (xv[None, :] if single else x)
    R = engine._val(xb).shape[0]
    kap = np.broadcast_to(kernel_weights(ens, t), (R, ens.kernels))
    y = ensemble_rows(ens, w, xb, np.ascontiguousarray(kap))
    if single:
        return engine.reshape(y, (-1,)) if isinstance(y, Node) else y[0]
    return y


def time_scalar_eval(head, coeffs, t):
    """Sum_k kappa_k(t) * coefficient_k."""
    kap = kernel_weights(head, t)
    return engine.sum_(engine.mul(coeffs, kap))


def time_scalar_rows(head, coeffs, times, rows_per_block):
    """Head values on a grid-major flat batch: rows k*B..(k+1)*B get t=times[k]."""
    kap = kappa_rows(head, list(times), rows_per_block)
    out = engine.matmul(kap, engine.reshape(coeffs, (head.kernels, 1)))
    return engine.reshape(out, (-1,))


OUTPUT_LAYER_INIT_SCALE = 0.1


def init_ensemble(ens, rng):
    """Fan-in scaled zero-mean weights, zero biases -> flat member-major vector.

    The output layer starts 10x smaller so the flow begins near the identity
    (the trainable objects should perturb, not dominate, at step 0).
    """
    out = np.zeros(ens.param_length)
    d = ens.mlp.dims
    off = 0
    for _ in range(ens.kernels):
        for i in range(len(d) - 1):
            n_in, n_out = d[i], d[i + 1]
            scale = 1.0 if i < len(d) - 2 else OUTPUT_LAYER_INIT_SCALE
            out[off : off + n_in * n_out] = scale * rng.standard_normal(n_in * n_out) / np.sqrt(n_in)
            off += n_in * n_out
            off += n_out  # biases stay zero
    return out


class FlowModel:
    """The trainable bundle: V plus optional C, f, D with one ParamStore layout."""

    def __init__(self, n, V, C=None, f=None, D=None):
        self.n = n
        self.V = V
        self.C = C
        self.f = f
        self.D = D
        if V.mlp.in_dim != n or V.mlp.out_dim != n:
            raise ValueError("V must map R^n -> R^n")
        if f is not None and (f.mlp.in_dim != n or f.mlp.out_dim != 1):
            raise ValueError("f must map R^n -> R")
        sizes = {"V": V.param_length}
        if C is not None:
            sizes["C"] = C.param_length
        if f is not None:
            sizes["f"] = f.param_length
        if D is not None:
            sizes["D"] = D.param_length
        self.template = ParamStore.build(sizes)

    def init_store(self, seed):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
        store = self.template.copy()
        store.set("V", init_ensemble(self.V, rng))
        if self.f is not None:
            store.set("f", init_ensemble(self.f, rng))
        # C and D coefficients start at zero
        return store

    # slicing helpers: params is the full vector (Node or ndarray)
    def v_rows(self, params, X, kap):
        return ensemble_rows(self.V, slice_of(params, self.template, "V"), X, kap)

    def v_eval(self, params, t, x):
        return ensemble_eval(self.V, slice_of(params, self.template, "V"), t, x)

    def c_eval(self, params, t):
        if self.C is None:
            return 0.0
        return time_scalar_eval(self.C, slice_of(params, self.template, "C"), t)

    def c_rows(self, params, times, B):
        """C_t on a grid-major flat batch; zero when no C head is present."""
        if self.C is None:
            return np.zeros(len(times) * B)
        return time_scalar_rows(self.C, slice_of(params, self.template, "C"), times, B)

    def f_rows(self, params, X, kap):
        return ensemble_rows(self.f, slice_of(params, self.template, "f"), X, kap)

    def f_eval(self, params, t, x):
        return ensemble_eval(self.f, slice_of(params, self.template, "f"), t, x)

    def d_eval(self, params, t):
        if self.D is None:
            return 0.0
        return time_scalar_eval(self.D, slice_of(params, self.template, "D"), t)


def save_checkpoint(path, store):
    """Binary checkpoint: magic, slice table, then little-endian float64 values."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(store.layout)))
        for s in store.layout:
            name = s.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<QQ", s.offset, s.length))
        fh.write(store.values.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(6) != MAGIC:
            raise ValueError(f"{path}: not a DFLOW1 checkpoint")
        (count,) = struct.unpack("<I", fh.read(4))
        layout = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            off, length = struct.unpack("<QQ", fh.read(16))
            layout.append((name, off, length))
        total = sum(s[2] for s in layout)
        values = np.frombuffer(fh.read(total * 8), dtype="<f8").astype(np.float64)
    return ParamStore(values, layout)
