"""Time-indexed energy interpolations f_t between base and target.

Three kinds: linear, learned (network-corrected with the t(1-t) boundary
factor), and the closed-form diffusion of a Gaussian mixture (stretch the
target by sqrt(t), convolve with the base Gaussian kernel).  Also provides
the diffusion-PDE residual used as an analytic oracle and the interpolation
error of the combined objective.
"""

from dataclasses import dataclass

import numpy as np

from . import energies, engine, nets
from .energies import GaussianMixtureSpec, NormalBaseSpec
from .engine import FDConfig, Node, custom

KINDS = ("linear", "learned", "mixture_diffusion")

# the diffusion family has velocity ~ t^(-1/2) near t=0; time derivatives at
# grid point t=0 are evaluated at this floor instead of the singular endpoint
T_FLOOR = 1e-3


class InterpError(Exception):
    pass


@dataclass(frozen=True)
class Interpolant:
    kind: str
    base: object
    target: object
    correction: object = None        # RbfTimeEnsemble of the learned kind
    sigma_base: float | None = None  # diffusion kind only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InterpError(f"unknown interpolation kind: {self.kind}")
        if energies.dim_of(self.base) != energies.dim_of(self.target):
            raise InterpError("base and target dimensions differ")
        if self.kind == "learned" and self.correction is None:
            raise InterpError("learned interpolation needs a correction network")
        if self.kind == "mixture_diffusion":
            if not isinstance(self.target, GaussianMixtureSpec):
                raise InterpError("mixture_diffusion needs a Gaussian-mixture target")
            if not isinstance(self.base, NormalBaseSpec):
                raise InterpError("mixture_diffusion needs an isotropic normal base")
            sig = self.sigma_base if self.sigma_base is not None else self.base.std
            if abs(sig - self.base.std) > 1e-12:
                raise InterpError("diffusion sigma must equal the base std")

    @property
    def sigma(self):
        if self.sigma_base is not None:
            return self.sigma_base
        if isinstance(self.base, NormalBaseSpec):
            return self.base.std
        raise InterpError("no sigma available")

    @property
    def n(self):
        return energies.dim_of(self.base)


def diffused_mixture(mix, sigma, t):
    """Mixture parameters at diffusion time t: weights unchanged, means
    scaled by sqrt(t), variances t*s_i^2 + sigma^2*(1-t)."""
    w, mu, var = mix.arrays()
    return GaussianMixtureSpec(
        weights=tuple(w),
        means=tuple(map(tuple, np.sqrt(t) * mu)),
        variances=tuple(t * var + sigma**2 * (1.0 - t)),
    )


def _norm_shift(itp):
    # constant removed from -log p_t so that f at t=0 equals |x|^2/(2 sigma^2)
    n = itp.n
    return 0.5 * n * np.log(2.0 * np.pi * itp.sigma**2)


# ---------------------------------------------------------------------------
# closed-form pieces of the diffused mixture (value level)
# ---------------------------------------------------------------------------

def _diffusion_parts(mix, sigma, t, x):
    """Per-component quantities of the diffused mixture at (t, x).

    Returns dict with g (B,k) densities, d (B,k,n) offsets, v (k,) variances,
    vdot (k,), r (B,k) responsibilities, p (B,), a (B,k) = d/dt log g_i.
    """
    w, mu, var = mix.arrays()
    n = mix.n
    v = t * var + sigma**2 * (1.0 - t)
    vdot = var - sigma**2
    m = np.sqrt(t) * mu
    d = x[:, None, :] - m[None, :, :]
    d2 = (d**2).sum(axis=2)
    logg = -0.5 * n * np.log(2.0 * np.pi * v)[None, :] - d2 / (2.0 * v)[None, :]
    shift = logg.max(axis=1, keepdims=True)
    gs = np.exp(logg - shift)           # scaled densities, stable
    ps = (w[None, :] * gs).sum(axis=1)  # scaled p
    r = w[None, :] * gs / ps[:, None]
    dmu = (d * mu[None, :, :]).sum(axis=2)
    a = (-0.5 * n * vdot / v)[None, :] + d2 * (0.5 * vdot / v**2)[None, :] + dmu / (2.0 * np.sqrt(t) * v)[None, :]
    return {"w": w, "mu": mu, "n": n, "v": v, "vdot": vdot, "d": d, "d2": d2,
            "gs": gs, "ps": ps, "r": r, "a": a, "shift": shift[:, 0]}


def _diffusion_dt_value(itp, t, x, floor=T_FLOOR):
    """d/dt of the shifted diffusion energy, batch (B,)."""
    te = max(t, floor)
    parts = _diffusion_parts(itp.target, itp.sigma, te, x)
    dt_logp = (parts["r"] * parts["a"]).sum(axis=1)
    return -dt_logp + _norm_shift(itp)


def _diffusion_dt_grad_x(itp, t, x, floor=T_FLOOR):
    """Spatial gradient of _diffusion_dt_value (for the VJP), (B, n)."""
    te = max(t, floor)
    p = _diffusion_parts(itp.target, itp.sigma, te, x)
    r, a, d, v, mu, vdot = p["r"], p["a"], p["d"], p["v"], p["mu"], p["vdot"]
    u = d / v[None, :, None]
    gradf = (r[:, :, None] * u).sum(axis=1)  # = grad of energy
    grad_a = vdot[None, :, None] * d / (v**2)[None, :, None] + mu[None, :, :] / (2.0 * np.sqrt(te) * v)[None, :, None]
    # grad r_i = r_i (gradf - u_i)
    total = (r[:, :, None] * ((gradf[:, None, :] - u) * a[:, :, None] + grad_a)).sum(axis=1)
    return -total


def f_eval(itp, t, x, model=None, params=None):
    """Interpolated energy at (t, x); x is a (B, n) batch (Node or array)."""
    if not 0.0 <= t <= 1.0:
        raise InterpError("t must lie in [0, 1]")
    if itp.kind == "linear":
        f0 = energies.energy(itp.base, x)
        f1 = energies.energy(itp.target, x)
        return engine.add(engine.mul(f0, 1.0 - t), engine.mul(f1, t))
    if itp.kind == "learned":
        f0 = energies.energy(itp.base, x)
        f1 = energies.energy(itp.target, x)
        lin = engine.add(engine.mul(f0, 1.0 - t), engine.mul(f1, t))
        if t in (0.0, 1.0):
            return lin  # boundary factor t(1-t) is exactly zero
        corr = model.f_eval(params, t, x)
        corr = engine.reshape(corr, (-1,)) if isinstance(corr, Node) else corr[:, 0]
        return engine.add(lin, engine.mul(corr, t * (1.0 - t)))
    # mixture_diffusion
    spec_t = diffused_mixture(itp.target, itp.sigma, t)
    shift = (1.0 - t) * _norm_shift(itp)
    return engine.sub(energies.energy(spec_t, x), shift)


def f_space_grad(itp, t, x, model=None, params=None, cfg=None):
    return derivatives(itp, t, x, model, params, cfg)[1]


def f_time_partial(itp, t, x, model=None, params=None, cfg=None):
    return derivatives(itp, t, x, model, params, cfg)[0]


def _corr_stencil(itp, model, params, t, x, cfg):
    """One stacked ensemble evaluation giving the correction's value, time
    derivative, and spatial gradient at (t, x).  Rows: [center; extra time
    points; space pairs]."""
    cfg = cfg or FDConfig()
    xv = engine._val(x)
    B, n = xv.shape
    times, coeffs = engine.time_stencil(t, cfg.h_time)
    extra = [tau for tau in times if tau != t]
    h = cfg.space_step(x)
    nblocks = 1 + len(extra) + 2 * n
    offs = np.zeros((nblocks, B, n))
    for i in range(n):
        offs[1 + len(extra) + 2 * i, :, i] = h
        offs[1 + len(extra) + 2 * i + 1, :, i] = -h
    stack = engine.add(engine.tile_rows(x, nblocks), offs.reshape(nblocks * B, n))
    kap = nets.kappa_rows(model.f, [t] + extra + [t] * (2 * n), B)
    y = model.f_rows(params, stack, kap)
    y = engine.reshape(y, (-1,))
    center = engine.take_rows(y, 0, B)
    # d/dt: coefficients applied to the stencil's evaluation times
    block_of = {t: center}
    for j, tau in enumerate(extra):
        block_of[tau] = engine.take_rows(y, (1 + j) * B, (2 + j) * B)
    dt = None
    for tau, c in zip(times, coeffs):
        term = engine.mul(block_of[tau], c)
        dt = term if dt is None else engine.add(dt, term)
    space = engine.take_rows(y, (1 + len(extra)) * B, nblocks * B)
    grad = engine.grad_from_stencil(space, n, h)
    return center, dt, grad, space, h


def derivatives_flat(itp, times, B, xflat, model=None, params=None, cfg=None):
    """(d/dt f, grad f) on the grid-major flat batch: rows k*B..(k+1)*B of
    xflat sit at times[k].  One stacked network evaluation serves every grid
    time of the learned correction."""
    cfg = cfg or FDConfig()
    M = engine._val(xflat).shape[0]
    n = engine._val(xflat).shape[1]
    trow = np.repeat(np.asarray(times, dtype=np.float64), B)

    if itp.kind in ("linear", "learned"):
        f0 = energies.energy(itp.base, xflat)
        f1 = energies.energy(itp.target, xflat)
        dt_lin = engine.sub(f1, f0)
        g0 = energies.energy_grad(itp.base, xflat)
        g1 = energies.energy_grad(itp.target, xflat)
        gradf = engine.add(
            engine.mul(g0, (1.0 - trow)[:, None]), engine.mul(g1, trow[:, None])
        )
        if itp.kind == "linear":
            return dt_lin, gradf
        # learned correction: one stack holding [center; two time-stencil
        # blocks; 2n space pairs], per-row kernel weights carrying the times
        stencils = [engine.time_stencil3(t, cfg.h_time) for t in times]
        tau1 = [s[0][1] for s in stencils]
        tau2 = [s[0][2] for s in stencils]
        c0 = np.repeat([s[1][0] for s in stencils], B)
        c1 = np.repeat([s[1][1] for s in stencils], B)
        c2 = np.repeat([s[1][2] for s in stencils], B)
        h = cfg.space_step(xflat)
        nblocks = 3 + 2 * n
        offs = np.zeros((nblocks, M, n))
        for i in range(n):
            offs[3 + 2 * i, :, i] = h
            offs[3 + 2 * i + 1, :, i] = -h
        stack = engine.add(engine.tile_rows(xflat, nblocks), offs.reshape(nblocks * M, n))
        kap_center = nets.kappa_rows(model.f, list(times), B)
        kap = np.concatenate(
            [kap_center, nets.kappa_rows(model.f, tau1, B), nets.kappa_rows(model.f, tau2, B)]
            + [kap_center] * (2 * n),
            axis=0,
        )
        y = engine.reshape(model.f_rows(params, stack, np.ascontiguousarray(kap)), (-1,))
        center = engine.take_rows(y, 0, M)
        b1 = engine.take_rows(y, M, 2 * M)
        b2 = engine.take_rows(y, 2 * M, 3 * M)
        dt_corr = engine.add(
            engine.add(engine.mul(center, c0), engine.mul(b1, c1)), engine.mul(b2, c2)
        )
        space = engine.take_rows(y, 3 * M, nblocks * M)
        grad_corr = engine.grad_from_stencil(space, n, h)
        w = trow * (1.0 - trow)
        dtf = engine.add(
            dt_lin,
            engine.add(engine.mul(center, 1.0 - 2.0 * trow), engine.mul(dt_corr, w)),
        )
        gradf = engine.add(gradf, engine.mul(grad_corr, w[:, None]))
        return dtf, gradf

    # mixture_diffusion: closed forms looped over the grid times inside one
    # node; the time-derivative clamp near the singular t = 0 endpoint sits at
    # half the grid spacing so the first grid point matches its neighbors' scale
    floor = max(T_FLOOR, 0.5 * abs(times[1] - times[0])) if len(times) > 1 else T_FLOOR

    def dt_value(xv):
        out = np.empty(M)
        for k, t in enumerate(times):
            out[k * B : (k + 1) * B] = _diffusion_dt_value(itp, t, xv[k * B : (k + 1) * B], floor)
        return out

    def dt_vjp(g):
        out = np.empty((M, n))
        xv = engine._val(xflat)
        for k, t in enumerate(times):
            sl = slice(k * B, (k + 1) * B)
            out[sl] = g[sl, None] * _diffusion_dt_grad_x(itp, t, xv[sl], floor)
        return out

    def grad_value(xv):
        out = np.empty((M, n))
        for k, t in enumerate(times):
            sl = slice(k * B, (k + 1) * B)
            out[sl] = energies.energy_grad_value(diffused_mixture(itp.target, itp.sigma, t), xv[sl])
        return out

    def grad_vjp(g):
        out = np.empty((M, n))
        xv = engine._val(xflat)
        for k, t in enumerate(times):
            sl = slice(k * B, (k + 1) * B)
            spec_t = diffused_mixture(itp.target, itp.sigma, t)
            out[sl] = energies.energy_hvp_value(spec_t, xv[sl], g[sl])
        return out

    if isinstance(xflat, Node):
        xv = xflat.value
        dtf = custom("diffusion_dt", dt_value(xv), [(xflat, dt_vjp)], dt_value)
        gradf = custom("diffusion_gradf", grad_value(xv), [(xflat, grad_vjp)], grad_value)
        return dtf, gradf
    xv = engine._val(xflat)
    return dt_value(xv), grad_value(xv)


def derivatives(itp, t, x, model=None, params=None, cfg=None):
    """(d/dt f_t, grad f_t) at (t, x); analytic where closed forms exist,
    engine stencils for the learned correction."""
    if itp.kind == "learned" and (model is None or params is None):
        raise InterpError("learned interpolation needs (model, params)")
    if itp.kind == "linear":
        f0 = energies.energy(itp.base, x)
        f1 = energies.energy(itp.target, x)
        dtf = engine.sub(f1, f0)
        g0 = energies.energy_grad(itp.base, x)
        g1 = energies.energy_grad(itp.target, x)
        gradf = engine.add(engine.mul(g0, 1.0 - t), engine.mul(g1, t))
        return dtf, gradf
    if itp.kind == "learned":
        f0 = energies.energy(itp.base, x)
        f1 = energies.energy(itp.target, x)
        dt_lin = engine.sub(f1, f0)
        g0 = energies.energy_grad(itp.base, x)
        g1 = energies.energy_grad(itp.target, x)
        grad_lin = engine.add(engine.mul(g0, 1.0 - t), engine.mul(g1, t))
        center, dt_corr, grad_corr, _, _ = _corr_stencil(itp, model, params, t, x, cfg)
        w = t * (1.0 - t)
        dtf = engine.add(dt_lin, engine.add(engine.mul(center, 1.0 - 2.0 * t), engine.mul(dt_corr, w)))
        gradf = engine.add(grad_lin, engine.mul(grad_corr, w))
        return dtf, gradf
    # mixture_diffusion: closed-form derivatives of the shifted energy
    spec_t = diffused_mixture(itp.target, itp.sigma, t)
    gradf = energies.energy_grad(spec_t, x)
    if isinstance(x, Node):
        xv = x.value
        val = _diffusion_dt_value(itp, t, xv)
        dtf = custom(
            "diffusion_dt", val,
            [(x, lambda g: g[:, None] * _diffusion_dt_grad_x(itp, t, xv))],
            lambda xx: _diffusion_dt_value(itp, t, xx),
        )
    else:
        dtf = _diffusion_dt_value(itp, t, engine._val(x))
    return dtf, gradf


# ---------------------------------------------------------------------------
# appendix oracles and residuals
# ---------------------------------------------------------------------------

def diffusion_density_residual(mix, sigma, t, x):
    """Residual of the density-space diffusion PDE; the closed-form diffused
    mixture satisfies it exactly (analytic oracle), so values should vanish
    to rounding.  t must lie in (0, 1]."""
    if t <= 0.0:
        raise InterpError("the diffusion PDE is singular at t = 0")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = _diffusion_parts(mix, sigma, t, x)
    w, gs, n, v, d, d2 = p["w"], p["gs"], p["n"], p["v"], p["d"], p["d2"]
    # all terms share the scale exp(shift); the residual is reported unscaled
    scale = np.exp(p["shift"])
    ps = p["ps"]
    dt_p = (w[None, :] * gs * p["a"]).sum(axis=1)
    grad_p = -(w[None, :, None] * gs[:, :, None] * d / v[None, :, None]).sum(axis=1)
    grad_p_dot_x = (grad_p * x).sum(axis=1)
    lap_p = (w[None, :] * gs * (d2 / (v**2)[None, :] - (n / v)[None, :])).sum(axis=1)
    resid = dt_p + (n * ps + grad_p_dot_x + sigma**2 * lap_p) / (2.0 * t)
    return resid * scale


def diffusion_dt_density(mix, sigma, t, x):
    """d/dt p_t(x) of the diffused mixture (reference scale for residual tests)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    p = _diffusion_parts(mix, sigma, t, x)
    return (p["w"][None, :] * p["gs"] * p["a"]).sum(axis=1) * np.exp(p["shift"])


def interpolation_error(itp, D, t, x, sigma=None, model=None, params=None, cfg=None):
    """Appendix residual: (2t) df/dt + <grad f, x> + sigma^2 (lap f - |grad f|^2) + D_t.

    D is a callable t -> scalar, or None when the model carries a D head.
    The Laplacian uses central second differences of the full f per
    coordinate; first derivatives come from `derivatives`.
    """
    cfg = cfg or FDConfig()
    sigma = sigma if sigma is not None else itp.sigma
    xv = engine._val(x)
    B, n = np.atleast_2d(xv).shape
    dtf, gradf = derivatives(itp, t, x, model, params, cfg)
    h = cfg.space_step(x)
    stack, _ = engine.space_stencil_stack(x, h, include_center=True)
    fstack = f_eval(itp, t, stack, model, params)
    lap = engine.lap_from_stencil(fstack, n, h)
    if D is not None:
        dval = D(t)
    else:
        dval = model.d_eval(params, t)
    term_dt = engine.mul(dtf, 2.0 * t)
    term_adv = engine.inner_rows(gradf, x)
    grad2 = engine.sum_(engine.mul(gradf, gradf), axis=-1)
    resid = engine.add(term_dt, term_adv)
    resid = engine.add(resid, engine.mul(engine.sub(lap, grad2), sigma**2))
    return engine.add(resid, dval)
