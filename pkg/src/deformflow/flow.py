"""Continuous normalizing flow: RK4 transport of base samples along V_t,
divergence-integral accounting for the model log-density, and the pointwise
deformation-equation residual.

Residual-grade quantities are evaluated on the "flat" layout: the S+1 grid
states concatenated into one ((S+1)*B, n) batch, so divergence stencils and
interpolation derivatives for every grid time go through a single ensemble
evaluation with per-row kernel weights.
"""

from dataclasses import dataclass, field

import numpy as np

from . import energies, engine, interp as interp_mod, nets
from .engine import FDConfig, Node


class FlowError(Exception):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    steps: int = 50
    scheme: str = "rk4"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.scheme != "rk4":
            raise ValueError(f"unknown scheme: {self.scheme}")


@dataclass
class Trajectory:
    """Grid states of one transported batch plus divergence accounting.

    states[k] is the batch position at times[k]; v_stage1[k] = V(times[k],
    states[k]) comes free from the RK4 stages.  div_integral (filled by
    attach_divergence) approximates the integral of div V from times[0] to
    times[k] with the trapezoidal rule; div_integral[0] = 0.
    """

    times: np.ndarray
    states: list
    v_stage1: list
    z: np.ndarray
    div_flat: object = None
    div_integral: object = None  # (S+1, B) cumulative values

    @property
    def batch(self):
        return self.z.shape[0]

    def state_values(self):
        return np.stack([engine._val(s) for s in self.states])

    def final_state(self):
        return self.states[-1]

    def final_div_integral(self):
        if self.div_integral is None:
            raise FlowError("divergence not attached to this trajectory")
        return self.div_integral[-1]


def stage_kappa(model, t, B):
    return np.ascontiguousarray(
        np.broadcast_to(nets.kernel_weights(model.V, t), (B, model.V.kernels))
    )


def _v_batch(model, params, t, x):
    B = engine._val(x).shape[0]
    return model.v_rows(params, x, stage_kappa(model, t, B))


def _check_state(x, k, t):
    xv = engine._val(x)
    if not np.all(np.isfinite(xv)):
        bad = int(np.argwhere(~np.isfinite(xv).all(axis=1))[0][0])
        mx = np.nanmax(np.abs(xv))
        raise FlowError(
            f"non-finite state at step {k} (t={t:.4f}), sample {bad}; max|x| so far {mx:.3e}"
        )


def integrate_forward(model, params, z, icfg=None, t_span=(0.0, 1.0)):
    """Classical RK4 on the state; z: (B, n) base samples (constants)."""
    icfg = icfg or IntegratorConfig()
    t0, t1 = t_span
    S = icfg.steps
    dt = (t1 - t0) / S
    times = t0 + dt * np.arange(S + 1)
    z = np.ascontiguousarray(np.atleast_2d(z), dtype=np.float64)

    x = z
    states = [x]
    v_stage1 = []
    for k in range(S):
        t = times[k]
        k1 = _v_batch(model, params, t, x)
        v_stage1.append(k1)
        k2 = _v_batch(model, params, t + 0.5 * dt, engine.add(x, engine.mul(k1, 0.5 * dt)))
        k3 = _v_batch(model, params, t + 0.5 * dt, engine.add(x, engine.mul(k2, 0.5 * dt)))
        k4 = _v_batch(model, params, t + dt, engine.add(x, engine.mul(k3, dt)))
        incr = engine.add(engine.add(k1, engine.mul(engine.add(k2, k3), 2.0)), k4)
        x = engine.add(x, engine.mul(incr, dt / 6.0))
        _check_state(x, k + 1, times[k + 1])
        states.append(x)
    return Trajectory(times=times, states=states, v_stage1=v_stage1, z=z)


def states_flat(traj):
    """All grid states as one ((S+1)*B, n) batch (grid-major)."""
    return engine.concat_rows(traj.states)


def v_grid_flat(model, params, traj):
    """V at every grid point, reusing the first RK4 stage evaluations."""
    vS = _v_batch(model, params, traj.times[-1], traj.states[-1])
    return engine.concat_rows(list(traj.v_stage1) + [vS])


def _grid_kappa(model, times, B, blocks):
    """Per-row kernel weights for `blocks` copies of the grid-major flat batch."""
    per_grid = nets.kappa_rows(model.V, times, B)  # ((S+1)*B, K)
    return np.ascontiguousarray(np.tile(per_grid, (blocks, 1)))


def divergence_flat(model, params, xflat, times, B, cfg=None):
    """div V on the flat grid batch via one stacked central-difference pass."""
    cfg = cfg or FDConfig()
    n = engine._val(xflat).shape[1]
    h = cfg.space_step(xflat)
    stack, blocks = engine.space_stencil_stack(xflat, h)
    kap = _grid_kappa(model, times, B, blocks)
    y = model.v_rows(params, stack, kap)
    return engine.div_from_stencil(y, n, h)


def _divergence_values_chunked(model, params, xflat, times, B, cfg):
    """Value-mode divergence, chunked per grid point (keeps stacks bounded)."""
    out = np.empty(xflat.shape[0])
    for k, t in enumerate(times):
        xk = xflat[k * B : (k + 1) * B]
        h = cfg.space_step(xk)
        stack, _ = engine.space_stencil_stack(xk, h)
        kap = nets.kappa_rows(model.V, [t], stack.shape[0])
        y = model.v_rows(params, stack, kap)
        out[k * B : (k + 1) * B] = engine.div_from_stencil(y, xk.shape[1], h)
    return out


def attach_divergence(model, params, traj, cfg=None):
    """Fill div_flat and the cumulative trapezoidal div_integral (values)."""
    cfg = cfg or FDConfig()
    B = traj.batch
    xflat = states_flat(traj)
    if isinstance(xflat, Node):
        div = divergence_flat(model, params, xflat, traj.times, B, cfg)
        dv = engine._val(div).reshape(len(traj.times), B)
    else:
        div = _divergence_values_chunked(model, params, xflat, traj.times, B, cfg)
        dv = div.reshape(len(traj.times), B)
    dt = traj.times[1] - traj.times[0]
    cum = np.zeros_like(dv)
    np.cumsum(0.5 * dt * (dv[1:] + dv[:-1]), axis=0, out=cum[1:])
    traj.div_flat = div
    traj.div_integral = cum
    return traj


def div_total(div_flat, S, dt, B):
    """Trapezoidal integral of div V over the whole span, as a (B,) node."""
    wts = np.full((S + 1, 1), dt)
    wts[0] = wts[-1] = 0.5 * dt
    d = engine.reshape(div_flat, (S + 1, B))
    return engine.sum_(engine.mul(d, wts), axis=0)


def log_q_of_pushforward(model, params, base_spec, z, icfg=None, cfg=None):
    """Transport z forward; return (x1, log q(x1)) via the divergence integral."""
    cfg = cfg or FDConfig()
    traj = integrate_forward(model, params, z, icfg)
    log_base = energies.log_density_exact(base_spec, traj.z)
    xflat = states_flat(traj)
    B = traj.batch
    if isinstance(xflat, Node):
        div = divergence_flat(model, params, xflat, traj.times, B, cfg)
    else:
        div = _divergence_values_chunked(model, params, xflat, traj.times, B, cfg)
    total = div_total(div, len(traj.times) - 1, traj.times[1] - traj.times[0], B)
    logq = engine.sub(log_base, total)
    return traj.final_state(), logq


def integrate_backward(model, params, x, base_spec, icfg=None, cfg=None):
    """Integrate the time-reversed field from a target-space point back to the
    base; returns (z, log q(x)) using the same divergence identity."""
    icfg = icfg or IntegratorConfig()
    cfg = cfg or FDConfig()
    S = icfg.steps
    ds = 1.0 / S
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    B = x.shape[0]

    y = x
    back_states = [y]
    for k in range(S):
        t = 1.0 - k * ds

        def nv(tt, xx):
            return engine.neg(_v_batch(model, params, tt, xx))

        k1 = nv(t, y)
        k2 = nv(t - 0.5 * ds, engine.add(y, engine.mul(k1, 0.5 * ds)))
        k3 = nv(t - 0.5 * ds, engine.add(y, engine.mul(k2, 0.5 * ds)))
        k4 = nv(t - ds, engine.add(y, engine.mul(k3, ds)))
        incr = engine.add(engine.add(k1, engine.mul(engine.add(k2, k3), 2.0)), k4)
        y = engine.add(y, engine.mul(incr, ds / 6.0))
        _check_state(y, k + 1, t - ds)
        back_states.append(y)

    rev_times = 1.0 - ds * np.arange(S + 1)
    yflat = engine.concat_rows(back_states)
    if isinstance(yflat, Node):
        div = divergence_flat(model, params, yflat, rev_times, B, cfg)
    else:
        div = _divergence_values_chunked(model, params, yflat, rev_times, B, cfg)
    # the (s -> 1 - t) substitution leaves the trapezoid weights uniform
    total = div_total(div, S, ds, B)
    log_base = energies.log_density_exact(base_spec, engine._val(y))
    logq = engine.add(log_base, engine.neg(total))
    return y, logq


def model_fields(model, params):
    """(V, C) callables of a trained model, for residual diagnostics."""

    def V(t, rows):
        return _v_batch(model, params, t, rows)

    def C(t):
        return model.c_eval(params, t)

    return V, C


def deformation_error_at(t, x, itp, V, C, cfg=None, model=None, params=None):
    """Pointwise deformation residual  df/dt + <grad f, V> - div V + C_t.

    itp: an Interpolant, or any object with f_eval (and optionally analytic
    f_time_partial / f_space_grad methods).  V: callable (t, rows) -> rows,
    optionally providing .divergence(t, x).  C: callable t -> scalar.
    """
    cfg = cfg or FDConfig()
    xb = np.atleast_2d(engine._val(x)) if not isinstance(x, Node) else x
    if isinstance(itp, interp_mod.Interpolant):
        dtf, gradf = interp_mod.derivatives(itp, t, xb, model, params, cfg)
    else:
        if callable(getattr(itp, "f_time_partial", None)):
            dtf = itp.f_time_partial(t, xb)
        else:
            dtf = engine.fd_time_partial(lambda tau: itp.f_eval(tau, xb), t, cfg)
        if callable(getattr(itp, "f_space_grad", None)):
            gradf = itp.f_space_grad(t, xb)
        else:
            gradf = engine.fd_space_grad(lambda rows: itp.f_eval(t, rows), xb, cfg)
    vx = V(t, xb)
    if callable(getattr(V, "divergence", None)):
        dv = V.divergence(t, xb)
    else:
        dv = engine.fd_divergence(lambda rows: V(t, rows), xb, cfg)
    cval = C(t) if callable(C) else C
    resid = engine.add(dtf, engine.inner_rows(gradf, vx))
    resid = engine.sub(resid, dv)
    return engine.add(resid, cval)
