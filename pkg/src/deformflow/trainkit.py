"""Optimization loop: Adam with cosine learning-rate annealing, seeded
batching, objective dispatch, checkpointing, periodic evaluation."""

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import energies, engine, interp as interp_mod, metrics, nets, objectives
from .engine import FDConfig
from .flow import IntegratorConfig

OBJECTIVES = (
    "reverse_kl",
    "deformation_linear",
    "deformation_learned",
    "deformation_diffusion_closed_form",
    "combined_appendix",
)


class TrainError(Exception):
    pass


class TrainAbort(TrainError):
    """Non-finite loss or gradient; carries the step and the offending batch."""

    def __init__(self, step, message, batch=None):
        super().__init__(f"training aborted at step {step}: {message}")
        self.step = step
        self.batch = batch


@dataclass(frozen=True)
class TrainConfig:
    objective: str
    steps: int
    batch: int
    eval_batch: int = 4096
    lr0: float = 3e-3
    penalty: str = "abs_plus_square"
    penalty2: str = "abs_plus_square"
    integration_steps: int = 50
    seed: int = 0
    eval_every: int = 1000
    clip_norm: float = 100.0
    weight_cap: float = 10.0
    h_space: float = 1e-3
    h_time: float = 1e-3

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective: {self.objective}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.penalty not in objectives.PENALTIES:
            raise ValueError(f"unknown penalty: {self.penalty}")

    def integrator(self):
        return IntegratorConfig(steps=self.integration_steps)

    def fd(self):
        return FDConfig(h_space=self.h_space, h_time=self.h_time)


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n_params, **kw):
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), **kw)


def lr_schedule(step, cfg):
    """Cosine annealing from lr0 at step 0 to exactly 0 at the final step."""
    if not 0 <= step <= cfg.steps:
        raise ValueError("step out of range")
    if cfg.steps == 0:
        return 0.0
    return cfg.lr0 * 0.5 * (1.0 + np.cos(np.pi * step / cfg.steps))


def adam_step(theta, grad, state, lr):
    """Standard bias-corrected Adam update; returns the updated pair."""
    if not np.all(np.isfinite(grad)):
        raise TrainError("non-finite gradient passed to adam_step")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    mhat = state.m / (1.0 - b1**state.step)
    vhat = state.v / (1.0 - b2**state.step)
    theta = theta - lr * mhat / (np.sqrt(vhat) + state.eps)
    return theta, state


def _clip(grad, max_norm):
    gn = float(np.linalg.norm(grad))
    if max_norm and gn > max_norm:
        return grad * (max_norm / gn), gn
    return grad, gn


def _fit_head(head, targets, ts):
    """Least-squares kernel coefficients reproducing targets(t) on a grid."""
    A = np.stack([nets.kernel_weights(head, t) for t in ts])
    coef, *_ = np.linalg.lstsq(A, np.asarray(targets), rcond=None)
    return coef


def init_time_heads(model, store, itp, cfg, seed, n_probe=256):
    """Start C_t (and D_t) near their ideal magnitudes.

    The heads are per-kernel scalars, so Adam moves them by roughly the
    learning rate per step; the spatially constant part of the residual
    (e.g. the f1 - f0 offset, tens of units for far-mode targets) would eat
    most of a desk-scale budget.  Fitting the head to minus the batch-mean
    residual-without-head at a probe batch removes that offset at step 0.
    """
    z = energies.sample_base(itp.base, n_probe, np.random.default_rng(np.random.SeedSequence([int(seed), 4])))
    ts = np.linspace(0.0, 1.0, 9)
    if model.C is not None:
        targets = []
        for t in ts:
            dtf, _ = interp_mod.derivatives(itp, t, z, model, store.values, cfg)
            targets.append(-float(np.mean(engine._val(dtf))))
        store.set("C", _fit_head(model.C, targets, ts))
    if model.D is not None:
        sigma = itp.sigma
        targets = []
        for t in ts:
            resid = interp_mod.interpolation_error(itp, lambda _t: 0.0, t, z, sigma,
                                                   model=model, params=store.values, cfg=cfg)
            targets.append(-float(np.mean(engine._val(resid))))
        store.set("D", _fit_head(model.D, targets, ts))
    return store


def train(model, itp, tcfg, outdir=None, log=None, with_forward_metrics=True,
          workers=None):
    """Run the configured optimization; returns (final store, metrics history).

    Deterministic end-to-end under tcfg.seed (and a fixed worker count):
    batches come from one seeded stream, evaluation uses disjoint streams,
    initialization has its own.  With workers > 1 the batch is sharded over
    threads and BLAS pools are pinned to one thread each for the run.
    """
    icfg = tcfg.integrator()
    fdcfg = tcfg.fd()
    workers = objectives.default_workers() if workers is None else workers
    store = model.init_store(tcfg.seed)
    if tcfg.objective != "reverse_kl":
        init_time_heads(model, store, itp, fdcfg, tcfg.seed)
    opt = OptimizerState.fresh(len(store))
    batch_rng = np.random.default_rng(np.random.SeedSequence([int(tcfg.seed), 0]))
    history = []
    # one BLAS thread per worker: oversubscribing the small per-layer matmuls
    # is consistently slower than running them serially on these shapes
    try:
        import threadpoolctl

        limiter = threadpoolctl.threadpool_limits(1)
    except Exception:
        limiter = None

    def evaluate(step):
        rec = metrics.evaluate_model(
            model, store, itp.target, itp.base, tcfg.eval_batch, tcfg.seed,
            icfg, fdcfg, step=step, with_forward=with_forward_metrics, eval_stream=step,
        )
        history.append(rec)
        if outdir:
            metrics.write_metrics_csv(
                os.path.join(outdir, "metrics.csv"), [rec], append=(step > 0)
            )
            nets.save_checkpoint(os.path.join(outdir, f"ckpt_{step:06d}.dflow"), store)
        if log:
            log(f"step {step}: loss_eval rev_kl={rec.rev_kl_minus_logZ:.4f} "
                f"ess_r={rec.ess_r:.4f} hausdorff={rec.hausdorff:.3f}")
        return rec

    try:
        evaluate(0)
        losses = []
        for step in range(1, tcfg.steps + 1):
            z = energies.sample_base(itp.base, tcfg.batch, batch_rng)
            try:
                loss, grad = objectives.loss_and_grad(
                    tcfg.objective, model, store, itp, z,
                    penalty=tcfg.penalty, penalty2=tcfg.penalty2,
                    icfg=icfg, cfg=fdcfg, workers=workers, weight_cap=tcfg.weight_cap,
                )
            except Exception as e:
                _dump_batch(outdir, step, z)
                raise TrainAbort(step, str(e), batch=z) from e
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                _dump_batch(outdir, step, z)
                raise TrainAbort(step, "non-finite loss or gradient", batch=z)
            grad, _ = _clip(grad, tcfg.clip_norm)
            lr = lr_schedule(step, tcfg)
            store.values[:], opt = adam_step(store.values, grad, opt, lr)
            losses.append(loss)
            if log and step % max(1, tcfg.eval_every // 4) == 0:
                log(f"step {step}: loss={loss:.5f} lr={lr:.2e}")
            if step % tcfg.eval_every == 0 or step == tcfg.steps:
                evaluate(step)
    finally:
        if limiter is not None:
            limiter.unregister()
    return store, history


def _dump_batch(outdir, step, z):
    if not outdir:
        return
    path = os.path.join(outdir, f"abort_batch_step{step}.csv")
    with open(path, "w", newline="\n") as fh:
        fh.write(f"dim={z.shape[1]}\n")
        for row in z:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
