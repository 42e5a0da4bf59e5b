"""Command-line surface: train, eval, dump-interp, dump-traj.

Exit codes: 0 success, 1 configuration error, 2 numerical abort during
training.  DFLOW_THREADS caps BLAS concurrency.
"""

import argparse
import os
import sys

import numpy as np

from . import energies, flow, interp as interp_mod, metrics, nets, trainkit
from .config import ConfigError, load_config, make_interpolant, make_model, serialize_config
from .energies import Phi4Spec
from .trainkit import TrainAbort


def _apply_thread_cap():
    cap = os.environ.get("DFLOW_THREADS")
    if not cap:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(int(cap))
    except Exception:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", cap)


def _write_samples_csv(path, x):
    with open(path, "w", newline="\n") as fh:
        fh.write(f"dim={x.shape[1]}\n")
        for row in x:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_train(args):
    rc = load_config(args.config)
    outdir = args.output or rc.outdir
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "resolved.cfg"), "w", newline="\n") as fh:
        fh.write(serialize_config(rc))
    model = make_model(rc)
    itp = make_interpolant(rc, model)
    log = print if args.verbose else None
    try:
        store, history = trainkit.train(model, itp, rc.train, outdir=outdir, log=log)
    except TrainAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    nets.save_checkpoint(os.path.join(outdir, "ckpt_final.dflow"), store)
    last = history[-1]
    print(f"{rc.name}: rev_kl={last.rev_kl_minus_logZ:.4f} ess_r={last.ess_r:.4f} "
          f"hausdorff={last.hausdorff:.4f}")
    return 0


def cmd_eval(args):
    rc = load_config(args.config)
    model = make_model(rc)
    store = nets.load_checkpoint(args.checkpoint)
    expected = [(s.name, s.offset, s.length) for s in model.template.layout]
    got = [(s.name, s.offset, s.length) for s in store.layout]
    if expected != got:
        raise ConfigError(
            f"checkpoint slice table {got} does not match the config's model {expected}"
        )
    outdir = args.output or rc.outdir
    os.makedirs(outdir, exist_ok=True)
    rec = metrics.evaluate_model(
        model, store, rc.target, rc.base, args.n, args.seed,
        rc.train.integrator(), rc.train.fd(),
    )
    metrics.write_metrics_csv(os.path.join(outdir, "metrics_eval.csv"), [rec])
    z = energies.sample_base(
        rc.base, args.n,
        np.random.default_rng(np.random.SeedSequence([args.seed, 2, 0])),
    )
    traj = flow.integrate_forward(model, store.values, z, rc.train.integrator())
    x1 = np.asarray(traj.final_state())
    _write_samples_csv(os.path.join(outdir, "samples.csv"), x1)
    if isinstance(rc.target, Phi4Spec):
        centers, counts, curve = metrics.mean_field_histogram(x1, rc.target)
        metrics.write_histogram_csv(os.path.join(outdir, "mean_field_histogram.csv"),
                                    centers, counts, curve)
    print(rec.CSV_HEADER)
    print(rec.csv_row())
    return 0


def cmd_dump_interp(args):
    rc = load_config(args.config)
    try:
        x0, x1, steps = args.grid.split(",")
        x0, x1, steps = float(x0), float(x1), int(steps)
        times = [float(t) for t in args.times.split(",")]
    except ValueError as e:
        raise ConfigError(f"bad grid/times: {e}") from e
    n = rc.n
    npoints = (steps + 1) ** n
    if npoints > 10**7:
        raise ConfigError(
            f"grid has {npoints} points (> 1e7); reduce --grid steps or the dimension"
        )
    axes = [np.linspace(x0, x1, steps + 1)] * n
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    model = make_model(rc)
    store = nets.load_checkpoint(args.checkpoint) if args.checkpoint else model.init_store(rc.train.seed)
    itp = make_interpolant(rc, model)
    outdir = args.output or rc.outdir
    os.makedirs(outdir, exist_ok=True)
    path = os.path.join(outdir, "interp_grid.csv")
    with open(path, "w", newline="\n") as fh:
        cols = ",".join(f"x{i+1}" for i in range(n))
        fh.write(f"t,{cols},f,density\n")
        for t in times:
            fv = np.asarray(interp_mod.f_eval(itp, t, pts, model, store.values))
            dens = np.exp(-fv)
            for p, f, d in zip(pts, fv, dens):
                xs = ",".join(repr(float(v)) for v in p)
                fh.write(f"{t!r},{xs},{float(f)!r},{float(d)!r}\n")
    if rc.interp_kind == "mixture_diffusion":
        cpath = os.path.join(outdir, "interp_components.csv")
        with open(cpath, "w", newline="\n") as fh:
            cols = ",".join(f"mean{i+1}" for i in range(n))
            fh.write(f"t,component,weight,{cols},variance\n")
            for t in times:
                spec_t = interp_mod.diffused_mixture(rc.target, itp.sigma, t)
                w, mu, var = spec_t.arrays()
                for i in range(spec_t.k):
                    ms = ",".join(repr(float(v)) for v in mu[i])
                    fh.write(f"{t!r},{i},{float(w[i])!r},{ms},{float(var[i])!r}\n")
    print(f"wrote {path}")
    return 0


def cmd_dump_traj(args):
    rc = load_config(args.config)
    model = make_model(rc)
    store = nets.load_checkpoint(args.checkpoint)
    z = energies.sample_base(
        rc.base, args.count,
        np.random.default_rng(np.random.SeedSequence([args.seed, 4])),
    )
    traj = flow.integrate_forward(model, store.values, z, rc.train.integrator())
    states = traj.state_values()  # (S+1, B, n)
    outdir = args.output or rc.outdir
    os.makedirs(outdir, exist_ok=True)
    n = states.shape[2]
    for b in range(args.count):
        path = os.path.join(outdir, f"traj_{b:03d}.csv")
        with open(path, "w", newline="\n") as fh:
            cols = ",".join(f"x{i+1}" for i in range(n))
            fh.write(f"t,{cols}\n")
            for k, t in enumerate(traj.times):
                xs = ",".join(repr(float(v)) for v in states[k, b])
                fh.write(f"{float(t)!r},{xs}\n")
    print(f"wrote {args.count} trajectories to {outdir}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="deformflow",
                                description="Boltzmann sampling with deformation-trained flows")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config")
    t.add_argument("--output", default=None, help="override output.dir")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--n", type=int, default=4096)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--output", default=None)
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("dump-interp", help="tabulate f_t and exp(-f_t) on a grid")
    d.add_argument("config")
    d.add_argument("--grid", required=True, help="x0,x1,steps (same range per axis); use --grid=-8,8,50 for negative ranges")
    d.add_argument("--times", required=True, help="comma-separated times in [0,1]")
    d.add_argument("--checkpoint", default=None)
    d.add_argument("--output", default=None)
    d.set_defaults(fn=cmd_dump_interp)

    tr = sub.add_parser("dump-traj", help="dump transported sample trajectories")
    tr.add_argument("checkpoint")
    tr.add_argument("config")
    tr.add_argument("--count", type=int, default=8)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--output", default=None)
    tr.set_defaults(fn=cmd_dump_traj)
    return p


def main(argv=None):
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
