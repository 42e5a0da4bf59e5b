"""Base and target energy functions.

Each spec provides pointwise energy evaluation, an analytic gradient, an
analytic Hessian-vector product (used when gradients flow through sample
positions), exact sampling where possible, and the normalized log-density
where the partition function is known.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Node, custom


class EnergyError(Exception):
    pass


class UnnormalizedOnlyError(EnergyError):
    """The spec has no tractable partition function."""


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Mixture of isotropic Gaussians: weights w_i, means mu_i, variances s_i^2."""

    weights: tuple
    means: tuple          # k points, each of length n
    variances: tuple      # k positive reals

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise ValueError("need at least one component")
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        if np.any(np.asarray(self.variances) <= 0):
            raise ValueError("variances must be positive")
        m = np.asarray(self.means, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != w.size or len(self.variances) != w.size:
            raise ValueError("weights, means, variances must have matching lengths")

    @property
    def n(self):
        return len(self.means[0])

    @property
    def k(self):
        return len(self.weights)

    def arrays(self):
        return (
            np.asarray(self.weights, dtype=np.float64),
            np.asarray(self.means, dtype=np.float64),
            np.asarray(self.variances, dtype=np.float64),
        )


@dataclass(frozen=True)
class Phi4Spec:
    """One-dimensional phi^4 lattice on a cycle of N sites."""

    N: int
    m: float
    lam: float
    alpha: float

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if self.lam <= 0:
            raise ValueError("lambda must be > 0, else the density is not normalizable")

    @property
    def n(self):
        return self.N


@dataclass(frozen=True)
class GenGaussianBaseSpec:
    """Per-coordinate generalized Gaussian: energy sum_i |x_i/sigma|^p."""

    n: int
    sigma: float
    p: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")


@dataclass(frozen=True)
class NormalBaseSpec:
    n: int
    std: float = 1.0

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError("std must be > 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")


BASE_SPECS = (NormalBaseSpec, GenGaussianBaseSpec)


def dim_of(spec):
    return spec.n


def _check_dim(spec, x):
    if x.shape[-1] != dim_of(spec):
        raise EnergyError(f"{type(spec).__name__} expects dim {dim_of(spec)}, got {x.shape[-1]}")


# ---------------------------------------------------------------------------
# plain-array evaluation (vectorized over a batch)
# ---------------------------------------------------------------------------

def _mixture_log_density(spec, x):
    w, mu, var = spec.arrays()
    n = spec.n
    # (B, k) component log-densities, combined with log-sum-exp
    d2 = ((x[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
    logcomp = np.log(w) - 0.5 * n * np.log(2.0 * np.pi * var) - d2 / (2.0 * var)
    m = logcomp.max(axis=1)
    return m + np.log(np.exp(logcomp - m[:, None]).sum(axis=1))


def _mixture_resp(spec, x):
    """Responsibilities r_i(x), shape (B, k)."""
    w, mu, var = spec.arrays()
    n = spec.n
    d2 = ((x[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
    logcomp = np.log(w) - 0.5 * n * np.log(2.0 * np.pi * var) - d2 / (2.0 * var)
    m = logcomp.max(axis=1, keepdims=True)
    p = np.exp(logcomp - m)
    return p / p.sum(axis=1, keepdims=True)


def energy_value(spec, x):
    """Energy of each row of x (B, n) -> (B,)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_dim(spec, x)
    if isinstance(spec, GaussianMixtureSpec):
        return -_mixture_log_density(spec, x)
    if isinstance(spec, Phi4Spec):
        nxt = np.roll(x, -1, axis=1)
        return (
            (x - nxt) ** 2 - spec.m * x**2 + spec.lam * (x - spec.alpha) ** 4
        ).sum(axis=1)
    if isinstance(spec, GenGaussianBaseSpec):
        return (np.abs(x / spec.sigma) ** spec.p).sum(axis=1)
    if isinstance(spec, NormalBaseSpec):
        return (x**2).sum(axis=1) / (2.0 * spec.std**2)
    raise EnergyError(f"unknown spec type {type(spec).__name__}")


def energy_grad_value(spec, x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_dim(spec, x)
    if isinstance(spec, GaussianMixtureSpec):
        _, mu, var = spec.arrays()
        r = _mixture_resp(spec, x)
        u = (x[:, None, :] - mu[None, :, :]) / var[None, :, None]
        return (r[:, :, None] * u).sum(axis=1)
    if isinstance(spec, Phi4Spec):
        prv = np.roll(x, 1, axis=1)
        nxt = np.roll(x, -1, axis=1)
        return 2.0 * (2.0 * x - prv - nxt) - 2.0 * spec.m * x + 4.0 * spec.lam * (x - spec.alpha) ** 3
    if isinstance(spec, GenGaussianBaseSpec):
        z = x / spec.sigma
        return (spec.p / spec.sigma) * np.sign(z) * np.abs(z) ** (spec.p - 1.0)
    if isinstance(spec, NormalBaseSpec):
        return x / spec.std**2
    raise EnergyError(f"unknown spec type {type(spec).__name__}")


def energy_hvp_value(spec, x, v):
    """Hessian-vector product of the energy (needed for gradients through x)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if isinstance(spec, GaussianMixtureSpec):
        _, mu, var = spec.arrays()
        r = _mixture_resp(spec, x)
        u = (x[:, None, :] - mu[None, :, :]) / var[None, :, None]
        gradf = (r[:, :, None] * u).sum(axis=1)
        uv = (u * v[:, None, :]).sum(axis=2)
        term = (r * uv)[:, :, None] * (gradf[:, None, :] - u)
        iso = (r / var[None, :]).sum(axis=1)
        return term.sum(axis=1) + iso[:, None] * v
    if isinstance(spec, Phi4Spec):
        prv = np.roll(v, 1, axis=1)
        nxt = np.roll(v, -1, axis=1)
        return 2.0 * (2.0 * v - prv - nxt) - 2.0 * spec.m * v + 12.0 * spec.lam * (x - spec.alpha) ** 2 * v
    if isinstance(spec, GenGaussianBaseSpec):
        p = spec.p
        z = np.abs(x / spec.sigma)
        with np.errstate(divide="ignore", invalid="ignore"):
            diag = p * (p - 1.0) / spec.sigma**2 * np.where(z > 0, z ** (p - 2.0), 0.0)
        return diag * v
    if isinstance(spec, NormalBaseSpec):
        return v / spec.std**2
    raise EnergyError(f"unknown spec type {type(spec).__name__}")


# ---------------------------------------------------------------------------
# tape-aware entry points
# ---------------------------------------------------------------------------

def energy(spec, x):
    """Energy, differentiable through x when x is a tape Node."""
    if not isinstance(x, Node):
        out = energy_value(spec, x)
        return out if np.asarray(x).ndim > 1 else float(out[0])
    xv = x.value
    val = energy_value(spec, xv)
    return custom(
        "energy", val,
        [(x, lambda g: g[:, None] * energy_grad_value(spec, xv))],
        lambda xx: energy_value(spec, xx),
    )


def energy_grad(spec, x):
    """Analytic energy gradient; VJP uses the analytic Hessian-vector product."""
    if not isinstance(x, Node):
        out = energy_grad_value(spec, x)
        return out if np.asarray(x).ndim > 1 else out[0]
    xv = x.value
    val = energy_grad_value(spec, xv)
    return custom(
        "energy_grad", val,
        [(x, lambda g: energy_hvp_value(spec, xv, g))],
        lambda xx: energy_grad_value(spec, xx),
    )


# ---------------------------------------------------------------------------
# normalization and exact densities
# ---------------------------------------------------------------------------

def log_norm_const(spec):
    """log Z = log integral of e^{-energy}."""
    if isinstance(spec, GaussianMixtureSpec):
        return 0.0  # mixture densities are normalized by construction
    if isinstance(spec, NormalBaseSpec):
        return 0.5 * spec.n * math.log(2.0 * math.pi * spec.std**2)
    if isinstance(spec, GenGaussianBaseSpec):
        return spec.n * math.log(2.0 * spec.sigma * math.gamma(1.0 + 1.0 / spec.p))
    raise UnnormalizedOnlyError(f"{type(spec).__name__} has no tractable partition function")


def log_density_exact(spec, x):
    """Normalized log-density; fails for phi^4 (Z unknown)."""
    lz = log_norm_const(spec)
    out = -energy_value(spec, x) - lz
    return out if np.asarray(x).ndim > 1 else float(out[0])


# ---------------------------------------------------------------------------
# exact samplers
# ---------------------------------------------------------------------------

def _rng_of(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_base(spec, count, seed):
    """Exact i.i.d. samples from a base distribution."""
    rng = _rng_of(seed)
    if isinstance(spec, NormalBaseSpec):
        return spec.std * rng.standard_normal((count, spec.n))
    if isinstance(spec, GenGaussianBaseSpec):
        g = rng.gamma(1.0 / spec.p, 1.0, size=(count, spec.n))
        mag = spec.sigma * g ** (1.0 / spec.p)
        sign = rng.integers(0, 2, size=(count, spec.n)) * 2 - 1
        return mag * sign
    raise EnergyError(f"no exact base sampler for {type(spec).__name__}")


def sample_mixture(spec, count, seed):
    rng = _rng_of(seed)
    w, mu, var = spec.arrays()
    comp = rng.choice(spec.k, size=count, p=w)
    z = rng.standard_normal((count, spec.n))
    return mu[comp] + np.sqrt(var[comp])[:, None] * z


def sample_exact(spec, count, seed):
    if isinstance(spec, GaussianMixtureSpec):
        return sample_mixture(spec, count, seed)
    return sample_base(spec, count, seed)


def has_exact_sampler(spec):
    return isinstance(spec, (GaussianMixtureSpec, NormalBaseSpec, GenGaussianBaseSpec))
