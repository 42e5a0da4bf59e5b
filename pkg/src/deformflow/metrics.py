"""Evaluation suite: KL offsets, effective sample sizes, Hausdorff mode
coverage, phi^4 mode finding, and the mean-field histogram export."""

import csv
from dataclasses import dataclass

import numpy as np

from . import energies, flow
from .energies import GaussianMixtureSpec, Phi4Spec


class MetricsError(Exception):
    pass


@dataclass
class MetricsRecord:
    rev_kl_minus_logZ: float
    ess_r: float
    hausdorff: float
    fwd_kl_plus_logZ: float | None
    ess_f: float | None
    n_samples: int
    seed: int
    step: int = 0

    CSV_HEADER = "step,rev_kl,ess_r,hausdorff,fwd_kl,ess_f,n_samples,seed"

    def csv_row(self):
        def fmt(v):
            return "" if v is None else repr(float(v))

        return (
            f"{self.step},{fmt(self.rev_kl_minus_logZ)},{fmt(self.ess_r)},"
            f"{fmt(self.hausdorff)},{fmt(self.fwd_kl_plus_logZ)},{fmt(self.ess_f)},"
            f"{self.n_samples},{self.seed}"
        )


def _logsumexp(a):
    m = np.max(a)
    if np.isneginf(m):
        return -np.inf
    return m + np.log(np.exp(a - m).sum())


def rev_kl(x, logq, target):
    """Mean of log q(x) + f1(x) over model samples (reverse KL minus log Z)."""
    x = np.atleast_2d(x)
    if x.shape[0] < 2:
        raise MetricsError("need at least 2 samples")
    vals = logq + energies.energy_value(target, x)
    if not np.all(np.isfinite(vals)):
        raise MetricsError("non-finite reverse-KL summand")
    return float(vals.mean())


def ess_from_logweights(logw):
    """(mean w)^2 / mean(w^2), computed in log space; in (0, 1]."""
    n = logw.size
    l1 = _logsumexp(logw)
    if np.isneginf(l1):
        raise MetricsError("all importance weights are zero")
    l2 = _logsumexp(2.0 * logw)
    return float(np.exp(2.0 * l1 - l2 - np.log(n)))


def ess_reverse(x, logq, target):
    """ESS of p/q weights at model samples; invariant to the unknown log Z."""
    logw = -energies.energy_value(target, np.atleast_2d(x)) - logq
    return ess_from_logweights(logw)


def hausdorff(means, samples):
    """max over means of the min Euclidean distance to a sample (exact)."""
    means = np.atleast_2d(means)
    samples = np.atleast_2d(samples)
    if means.size == 0 or samples.size == 0:
        raise MetricsError("hausdorff needs nonempty sets")
    d2 = ((means[:, None, :] - samples[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).max())


def fwd_kl_and_ess(model, store, target, base, n, seed, icfg=None, cfg=None):
    """Forward KL (plus log Z) and forward ESS from exact target samples.

    Only available when the target admits exact sampling and a normalized
    log-density (Gaussian mixtures).
    """
    if not isinstance(target, GaussianMixtureSpec):
        raise MetricsError(f"no exact sampler for {type(target).__name__}")
    xs = energies.sample_exact(target, n, seed)
    _, logq = flow.integrate_backward(model, store.values, xs, base, icfg, cfg)
    logp = energies.log_density_exact(target, xs)
    fkl = float((logp - logq).mean())
    ess_f = ess_from_logweights(logq - logp)
    return fkl, ess_f


def phi4_modes(spec, max_iter=100, tol=1e-12):
    """The two local minima of the per-site potential -m phi^2 + lam (phi-alpha)^4.

    Newton iteration on the stationarity condition from starting points
    +-sqrt(m/(2 lam)); the constant fields (a,...,a), (b,...,b) are the mode
    means of the lattice density.
    """
    if spec.m <= 0:
        raise MetricsError("per-site potential is unimodal for m <= 0")
    roots = []
    for s in (-1.0, 1.0):
        phi = s * np.sqrt(spec.m / (2.0 * spec.lam))
        for _ in range(max_iter):
            g = -2.0 * spec.m * phi + 4.0 * spec.lam * (phi - spec.alpha) ** 3
            h = -2.0 * spec.m + 12.0 * spec.lam * (phi - spec.alpha) ** 2
            step = g / h
            phi -= step
            if abs(step) < tol:
                break
        else:
            raise MetricsError("mode finding did not converge in 100 iterations")
        roots.append(phi)
    a, b = sorted(roots)
    return a, b


def phi4_mode_means(spec):
    a, b = phi4_modes(spec)
    return np.stack([np.full(spec.N, a), np.full(spec.N, b)])


def mode_means(spec):
    """Reference mode locations used by the Hausdorff diagnostic."""
    if isinstance(spec, GaussianMixtureSpec):
        return np.asarray(spec.means, dtype=np.float64)
    if isinstance(spec, Phi4Spec):
        return phi4_mode_means(spec)
    return np.zeros((1, energies.dim_of(spec)))


def mean_field_histogram(samples, spec, bins=60, span=None):
    """Histogram of the per-sample lattice mean, with the mean-field reference
    curve  ~ exp(N (m phibar^2 - lam (phibar - alpha)^4))  normalized over the
    emitted bin centers.

    Returns (centers, counts, reference_density).
    """
    samples = np.atleast_2d(samples)
    phibar = samples.mean(axis=1)
    if span is None:
        a, b = phi4_modes(spec)
        lo = min(phibar.min(), a) - 1.0
        hi = max(phibar.max(), b) + 1.0
    else:
        lo, hi = span
    counts, edges = np.histogram(phibar, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    logcurve = spec.N * (spec.m * centers**2 - spec.lam * (centers - spec.alpha) ** 4)
    logcurve -= logcurve.max()
    curve = np.exp(logcurve)
    curve /= curve.sum() * width  # midpoint-rule normalization
    return centers, counts, curve


def write_metrics_csv(path, records, append=False):
    mode = "a" if append else "w"
    with open(path, mode, newline="\n") as fh:
        if not append:
            fh.write(MetricsRecord.CSV_HEADER + "\n")
        for r in records:
            fh.write(r.csv_row() + "\n")


def write_histogram_csv(path, centers, counts, curve):
    with open(path, "w", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center", "count", "reference_density"])
        for c, k, q in zip(centers, counts, curve):
            w.writerow([repr(float(c)), int(k), repr(float(q))])


def evaluate_model(model, store, target, base, n_samples, seed, icfg=None,
                   cfg=None, step=0, with_forward=True, eval_stream=0):
    """One evaluation snapshot on fresh samples from the flow.

    Evaluation streams are disjoint from training streams (distinct spawn
    keys of the same seed).
    """
    z = energies.sample_base(
        base, n_samples,
        np.random.default_rng(np.random.SeedSequence([int(seed), 2, int(eval_stream)])),
    )
    x1, logq = flow.log_q_of_pushforward(model, store.values, base, z, icfg, cfg)
    rkl = rev_kl(x1, logq, target)
    essr = ess_reverse(x1, logq, target)
    h = hausdorff(mode_means(target), x1)
    fkl = essf = None
    if with_forward and isinstance(target, GaussianMixtureSpec):
        fkl, essf = fwd_kl_and_ess(
            model, store, target, base, n_samples,
            np.random.default_rng(np.random.SeedSequence([int(seed), 3, int(eval_stream)])),
            icfg, cfg,
        )
    return MetricsRecord(rev_kl_minus_logZ=rkl, ess_r=essr, hausdorff=h,
                         fwd_kl_plus_logZ=fkl, ess_f=essf,
                         n_samples=n_samples, seed=seed, step=step)
