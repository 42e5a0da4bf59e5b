"""Training objectives.

The deformation loss penalizes the residual of the deformation equation
along the flow's own trajectories, each trajectory importance-weighted by
e^{-f1(x1)}/q(x1) with per-batch mean-1 normalization (weights are
treated as constants with respect to the parameters).  The reverse-KL
baseline and the combined deformation+interpolation objective share the
same integrator.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import energies, engine, flow, interp as interp_mod, nets
from .engine import FDConfig, Node, NonFiniteError

PENALTIES = ("abs", "square", "abs_plus_square", "log1p_abs")


def default_workers():
    # sharding helps only on boxes with enough idle cores; DFLOW_THREADS opts in
    cap = os.environ.get("DFLOW_THREADS")
    if cap:
        return max(1, int(cap))
    return 1


class ObjectiveError(Exception):
    pass


class DegenerateBatchError(ObjectiveError):
    """All raw trajectory weights are zero."""


def apply_penalty(resid, kind):
    """Monotone penalty of |residual|; zero at zero."""
    if kind == "abs":
        return engine.absolute(resid)
    if kind == "square":
        return engine.mul(resid, resid)
    if kind == "abs_plus_square":
        return engine.add(engine.absolute(resid), engine.mul(resid, resid))
    if kind == "log1p_abs":
        return engine.log1p(engine.absolute(resid))
    raise ObjectiveError(f"unknown penalty kind: {kind}")


def weights_from_log(logw, cap=None):
    """Mean-1 normalization of raw log-weights (log-space, stable).

    cap bounds the normalized weights (then renormalizes, preserving the
    exact mean-1 invariant): without it a single trajectory that wanders
    near a far mode carries the whole batch and training thrashes.
    """
    if np.all(np.isneginf(logw)):
        raise DegenerateBatchError("all raw trajectory weights are zero")
    if np.any(np.isnan(logw)) or np.any(np.isposinf(logw)):
        bad = int(np.argwhere(np.isnan(logw) | np.isposinf(logw))[0][0])
        raise ObjectiveError(f"non-finite trajectory weight for sample {bad}")
    m = logw.max()
    w = np.exp(logw - m)
    w = w / w.mean()
    if cap is not None:
        for _ in range(8):
            clipped = np.minimum(w, cap)
            if np.all(clipped == w):
                break
            w = clipped / clipped.mean()
    return w


def trajectory_weights(target, x1_values, logq_values, cap=None):
    """Normalized importance weights w(z) = e^{-f1(x1)}/q(x1), mean 1 per batch.

    Computed in log space; constants with respect to the parameters.
    """
    return weights_from_log(-energies.energy_value(target, x1_values) - logq_values, cap=cap)


def deformation_residuals(model, params, itp, z, icfg=None, cfg=None, t_span=(0.0, 1.0),
                          detach_positions=True):
    """Residuals of the deformation equation at every (grid time, sample).

    Returns (resid_flat, traj, div_flat) with resid_flat grid-major
    ((S+1)*B,).  With detach_positions (the default) the trajectory grid
    points enter the residual as constants: the parameters receive gradients
    for how well V solves the PDE at the visited points, not for moving the
    points somewhere easier (chasing the positions lets the flow collapse its
    own trajectory cloud instead of transporting it).
    """
    cfg = cfg or FDConfig()
    # with detached positions the transport itself needs no tape
    traj = flow.integrate_forward(
        model, engine._val(params) if detach_positions else params, z, icfg, t_span=t_span)
    B = traj.batch
    if detach_positions:
        xflat = np.concatenate([engine._val(s) for s in traj.states], axis=0)
        # one stacked evaluation: V at the grid points plus all divergence
        # stencil shifts (the stack is constant, so only W-gradients flow)
        n = xflat.shape[1]
        h = cfg.space_step(xflat)
        stack, _ = engine.space_stencil_stack(xflat, h, include_center=True)
        kap = flow._grid_kappa(model, traj.times, B, 2 * n + 1)
        y = model.v_rows(params, stack, kap)
        M = xflat.shape[0]
        vflat = engine.take_rows(y, 0, M)
        div = engine.div_from_stencil(y, n, h, include_center=True)
    else:
        xflat = flow.states_flat(traj)
        vflat = flow.v_grid_flat(model, params, traj)
        div = flow.divergence_flat(model, params, xflat, traj.times, B, cfg)
    dtf, gradf = interp_mod.derivatives_flat(itp, traj.times, B, xflat, model, params, cfg)
    resid = engine.add(dtf, engine.inner_rows(gradf, vflat))
    resid = engine.sub(resid, div)
    resid = engine.add(resid, model.c_rows(params, traj.times, B))
    return resid, traj, div


def _check_residuals(resid, times, B):
    rv = engine._val(resid)
    if not np.all(np.isfinite(rv)):
        bad = int(np.argwhere(~np.isfinite(rv))[0][0])
        raise ObjectiveError(
            f"non-finite residual (sample {bad % B}, t={times[bad // B]:.4f})"
        )


def deformation_loss(model, params, itp, z, penalty="abs_plus_square",
                     icfg=None, cfg=None, t_span=(0.0, 1.0), return_parts=False,
                     fixed_weights=None, detach_positions=True, weight_cap=None):
    """Trajectory-weighted grid average of the penalized deformation residual.

    For each base sample: integrate the trajectory, evaluate the penalty at
    the S+1 grid points (uniform weight 1/(S+1)), scale by the normalized
    trajectory weight, then average over the batch.  Weights are constants
    with respect to the parameters; fixed_weights substitutes a precomputed
    weight vector (gradient checks against difference quotients need the
    weights pinned).
    """
    if len(np.atleast_2d(z)) == 0:
        raise ObjectiveError("empty batch")
    cfg = cfg or FDConfig()
    try:
        resid, traj, div = deformation_residuals(model, params, itp, z, icfg, cfg, t_span,
                                                  detach_positions=detach_positions)
    except NonFiniteError as e:
        raise ObjectiveError(f"non-finite residual: {e}") from e
    B = traj.batch
    S = len(traj.times) - 1
    _check_residuals(resid, traj.times, B)
    pen = apply_penalty(resid, penalty)
    grid_mean = engine.mean_(engine.reshape(pen, (S + 1, B)), axis=0)
    if fixed_weights is not None:
        w = np.asarray(fixed_weights, dtype=np.float64)
    else:
        dt = traj.times[1] - traj.times[0]
        dv = engine._val(div).reshape(S + 1, B)
        div_int = (0.5 * dt * (dv[1:] + dv[:-1])).sum(axis=0)
        logq = energies.log_density_exact(itp.base, traj.z) - div_int
        w = trajectory_weights(itp.target, engine._val(traj.final_state()), logq, cap=weight_cap)
    loss = engine.mean_(engine.mul(grid_mean, w))
    if return_parts:
        return loss, traj, w
    return loss


def reverse_kl_loss(model, params, base, target, z, icfg=None, cfg=None):
    """Mean of log q(x1) + f1(x1) over pushed-forward base samples (the
    reverse KL up to the unknown log-partition)."""
    if len(np.atleast_2d(z)) == 0:
        raise ObjectiveError("empty batch")
    x1, logq = flow.log_q_of_pushforward(model, params, base, z, icfg, cfg)
    loss = engine.mean_(engine.add(logq, energies.energy(target, x1)))
    return loss


def combined_loss(model, params, itp, z, penalty1="abs_plus_square",
                  penalty2="abs_plus_square", sigma=None, icfg=None, cfg=None,
                  detach_positions=True):
    """Appendix objective: grid average of L1(deformation residual) plus
    L2(interpolation residual at detached trajectory positions).

    Returns (L1, L2) scalar nodes; the gradient routing ((V,C) from L1 only,
    (f,D) from L2 only) is applied by `loss_and_grad`.
    """
    cfg = cfg or FDConfig()
    sigma = sigma if sigma is not None else itp.sigma
    resid1, traj, _ = deformation_residuals(model, params, itp, z, icfg, cfg,
                                            detach_positions=detach_positions)
    B = traj.batch
    S = len(traj.times) - 1
    _check_residuals(resid1, traj.times, B)
    pen1 = apply_penalty(resid1, penalty1)
    l1 = engine.mean_(engine.mean_(engine.reshape(pen1, (S + 1, B)), axis=0))
    acc2 = None
    for k, t in enumerate(traj.times):
        x_det = engine._val(traj.states[k])  # constants inside the L2 term
        resid2 = interp_mod.interpolation_error(itp, None, t, x_det, sigma,
                                                model=model, params=params, cfg=cfg)
        pen2 = apply_penalty(resid2, penalty2)
        acc2 = pen2 if acc2 is None else engine.add(acc2, pen2)
    l2 = engine.mean_(engine.mul(acc2, 1.0 / (S + 1)))
    return l1, l2


def _mask_slices(g, store, keep):
    out = np.zeros_like(g)
    for name in keep:
        if name in store.names():
            lo, hi = store.bounds(name)
            out[lo:hi] = g[lo:hi]
    return out


def _shards(B, workers):
    per = (B + workers - 1) // workers
    out = []
    lo = 0
    while lo < B:
        hi = min(B, lo + per)
        out.append((lo, hi))
        lo = hi
    return out


def _grad_of(tape, p, root):
    tape.backward(root)
    return np.array(p.grad) if p.grad is not None else np.zeros_like(p.value)


def loss_and_grad(objective, model, store, itp, z, *, penalty="abs_plus_square",
                  penalty2="abs_plus_square", sigma=None, icfg=None, cfg=None,
                  base=None, target=None, t_span=(0.0, 1.0), fixed_weights=None,
                  workers=1, detach_positions=True, weight_cap=None):
    """One objective evaluation with its parameter gradient.

    objective: reverse_kl | deformation_linear | deformation_learned |
    deformation_diffusion_closed_form | combined_appendix.

    workers > 1 shards the batch over threads (independent tapes against the
    read-only parameter snapshot); losses and gradients are reduced in shard
    order, so results are reproducible for a fixed worker count.  Weight
    normalization stays full-batch.
    """
    z = np.ascontiguousarray(np.atleast_2d(z), dtype=np.float64)
    B = z.shape[0]
    if B == 0:
        raise ObjectiveError("empty batch")
    shards = _shards(B, max(1, min(workers, B)))
    deform = objective in (
        "deformation_linear", "deformation_learned", "deformation_diffusion_closed_form"
    )

    if objective == "reverse_kl":
        def run(shard):
            lo, hi = shard
            tape = engine.Tape()
            p = tape.param(store)
            root = reverse_kl_loss(model, p, base or itp.base, target or itp.target,
                                   z[lo:hi], icfg, cfg)
            return float(root.value) * (hi - lo) / B, _grad_of(tape, p, root) * ((hi - lo) / B)

        parts = _run_shards(run, shards)
        loss = sum(v for v, _ in parts)
        grad = sum_in_order(g for _, g in parts)
        return loss, grad

    if deform:
        def phase1(shard):
            lo, hi = shard
            tape = engine.Tape()
            p = tape.param(store)
            resid, traj, div = deformation_residuals(model, p, itp, z[lo:hi], icfg, cfg, t_span,
                                                      detach_positions=detach_positions)
            Bh = traj.batch
            S = len(traj.times) - 1
            _check_residuals(resid, traj.times, Bh)
            pen = apply_penalty(resid, penalty)
            grid_mean = engine.mean_(engine.reshape(pen, (S + 1, Bh)), axis=0)
            dt = traj.times[1] - traj.times[0]
            dv = engine._val(div).reshape(S + 1, Bh)
            div_int = (0.5 * dt * (dv[1:] + dv[:-1])).sum(axis=0)
            logq = energies.log_density_exact(itp.base, traj.z) - div_int
            logw = -energies.energy_value(itp.target, engine._val(traj.final_state())) - logq
            return tape, p, grid_mean, logw

        parts = _run_shards(phase1, shards)
        if fixed_weights is not None:
            w = np.asarray(fixed_weights, dtype=np.float64)
        else:
            w = weights_from_log(np.concatenate([pt[3] for pt in parts]), cap=weight_cap)

        def phase2(i):
            lo, hi = shards[i]
            tape, p, grid_mean, _ = parts[i]
            root = engine.mul(engine.mean_(engine.mul(grid_mean, w[lo:hi])), (hi - lo) / B)
            return float(root.value), _grad_of(tape, p, root)

        parts2 = _run_shards(phase2, range(len(shards)))
        loss = sum(v for v, _ in parts2)
        grad = sum_in_order(g for _, g in parts2)
        return loss, grad

    if objective == "combined_appendix":
        def run(shard):
            lo, hi = shard
            tape = engine.Tape()
            p = tape.param(store)
            l1, l2 = combined_loss(model, p, itp, z[lo:hi], penalty, penalty2, sigma, icfg, cfg,
                                   detach_positions=detach_positions)
            scale = (hi - lo) / B
            g1 = _grad_of(tape, p, l1)
            g2 = _grad_of(tape, p, l2)
            g = (_mask_slices(g1, store, ("V", "C")) + _mask_slices(g2, store, ("f", "D"))) * scale
            return (float(l1.value) + float(l2.value)) * scale, g

        parts = _run_shards(run, shards)
        loss = sum(v for v, _ in parts)
        grad = sum_in_order(g for _, g in parts)
        return loss, grad

    raise ObjectiveError(f"unknown objective: {objective}")


def _run_shards(fn, items):
    items = list(items)
    if len(items) == 1:
        return [fn(items[0])]
    with ThreadPoolExecutor(max_workers=len(items)) as ex:
        return list(ex.map(fn, items))


def sum_in_order(grads):
    out = None
    for g in grads:
        out = g.copy() if out is None else out + g
    return out
