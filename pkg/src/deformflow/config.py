"""Run configuration files.

Flat line-oriented "key = value" with dotted section prefixes; arrays are
comma-separated, lists of points use ';' between points.  '#' starts a
comment.  Unknown keys are errors, parse -> serialize -> parse is the
identity on the in-memory config.
"""

from dataclasses import dataclass

from .energies import (
    GaussianMixtureSpec,
    GenGaussianBaseSpec,
    NormalBaseSpec,
    Phi4Spec,
)
from .interp import Interpolant
from .nets import FlowModel, MlpSpec, RbfTimeEnsemble, TimeScalarHead
from .trainkit import OBJECTIVES, TrainConfig


class ConfigError(Exception):
    pass


_KEYS = {
    "experiment.name": str,
    "target.kind": str,
    "target.weights": "floats",
    "target.means": "points",
    "target.variances": "floats",
    "target.sites": int,
    "target.m": float,
    "target.lambda": float,
    "target.alpha": float,
    "base.kind": str,
    "base.dim": int,
    "base.std": float,
    "base.sigma": float,
    "base.p": float,
    "net.kernels": int,
    "net.hidden_layers": int,
    "net.width": int,
    "net.bandwidth": float,
    "interp.kind": str,
    "train.objective": str,
    "train.steps": int,
    "train.batch": int,
    "train.eval_batch": int,
    "train.lr0": float,
    "train.penalty": str,
    "train.penalty2": str,
    "train.integration_steps": int,
    "train.seed": int,
    "train.eval_every": int,
    "train.clip_norm": float,
    "output.dir": str,
}

_DEFAULTS = {
    "train.eval_batch": 4096,
    "train.lr0": 3e-3,
    "train.penalty": "abs_plus_square",
    "train.penalty2": "abs_plus_square",
    "train.integration_steps": 50,
    "train.seed": 0,
    "train.eval_every": 1000,
    "train.clip_norm": 100.0,
    "output.dir": "out",
    "interp.kind": "linear",
}


@dataclass(frozen=True)
class RunConfig:
    name: str
    target: object
    base: object
    kernels: int
    hidden_layers: int
    width: int
    bandwidth: float | None
    interp_kind: str
    train: TrainConfig
    outdir: str

    @property
    def n(self):
        from . import energies

        return energies.dim_of(self.base)


def _parse_scalar(key, kind, raw):
    try:
        if kind is str:
            return raw
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == "floats":
            return tuple(float(v) for v in raw.split(","))
        if kind == "points":
            return tuple(tuple(float(v) for v in pt.split(",")) for pt in raw.split(";"))
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e
    raise ConfigError(f"unhandled kind for {key}")


def parse_text(text):
    """Raw key -> typed value mapping, rejecting unknown keys."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"unknown key: {key}")
        if key in out:
            raise ConfigError(f"duplicate key: {key}")
        out[key] = _parse_scalar(key, _KEYS[key], raw)
    return out


def _require(kv, key):
    if key not in kv:
        raise ConfigError(f"missing key: {key}")
    return kv[key]


def build_config(kv):
    kv = dict(kv)
    for k, v in _DEFAULTS.items():
        kv.setdefault(k, v)

    tkind = _require(kv, "target.kind")
    try:
        if tkind == "mixture":
            target = GaussianMixtureSpec(
                weights=_require(kv, "target.weights"),
                means=_require(kv, "target.means"),
                variances=_require(kv, "target.variances"),
            )
        elif tkind == "phi4":
            target = Phi4Spec(
                N=_require(kv, "target.sites"),
                m=_require(kv, "target.m"),
                lam=_require(kv, "target.lambda"),
                alpha=_require(kv, "target.alpha"),
            )
        else:
            raise ConfigError(f"unknown target.kind: {tkind}")
    except ValueError as e:
        raise ConfigError(f"invalid target: {e}") from e

    bkind = _require(kv, "base.kind")
    n = _require(kv, "base.dim")
    try:
        if bkind == "normal":
            base = NormalBaseSpec(n=n, std=kv.get("base.std", 1.0))
        elif bkind == "gengauss":
            base = GenGaussianBaseSpec(n=n, sigma=_require(kv, "base.sigma"), p=_require(kv, "base.p"))
        else:
            raise ConfigError(f"unknown base.kind: {bkind}")
    except ValueError as e:
        raise ConfigError(f"invalid base: {e}") from e

    from . import energies

    if energies.dim_of(target) != n:
        raise ConfigError(f"base.dim={n} does not match target dimension {energies.dim_of(target)}")

    objective = _require(kv, "train.objective")
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown train.objective: {objective}")
    interp_kind = kv["interp.kind"]
    if objective == "deformation_linear":
        interp_kind = "linear"
    elif objective == "deformation_learned":
        interp_kind = "learned"
    elif objective == "deformation_diffusion_closed_form":
        interp_kind = "mixture_diffusion"
    elif objective == "combined_appendix":
        interp_kind = "learned"

    try:
        train = TrainConfig(
            objective=objective,
            steps=_require(kv, "train.steps"),
            batch=_require(kv, "train.batch"),
            eval_batch=kv["train.eval_batch"],
            lr0=kv["train.lr0"],
            penalty=kv["train.penalty"],
            penalty2=kv["train.penalty2"],
            integration_steps=kv["train.integration_steps"],
            seed=kv["train.seed"],
            eval_every=kv["train.eval_every"],
            clip_norm=kv["train.clip_norm"],
        )
    except ValueError as e:
        raise ConfigError(f"invalid train section: {e}") from e

    return RunConfig(
        name=_require(kv, "experiment.name"),
        target=target,
        base=base,
        kernels=_require(kv, "net.kernels"),
        hidden_layers=_require(kv, "net.hidden_layers"),
        width=_require(kv, "net.width"),
        bandwidth=kv.get("net.bandwidth"),
        interp_kind=interp_kind,
        train=train,
        outdir=kv["output.dir"],
    )


def parse_config(text):
    return build_config(parse_text(text))


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(rc):
    """Canonical text form; parse(serialize(rc)) == rc."""
    lines = [f"experiment.name = {rc.name}"]
    t = rc.target
    if isinstance(t, GaussianMixtureSpec):
        lines.append("target.kind = mixture")
        lines.append("target.weights = " + ",".join(repr(w) for w in t.weights))
        lines.append("target.means = " + "; ".join(",".join(repr(c) for c in pt) for pt in t.means))
        lines.append("target.variances = " + ",".join(repr(v) for v in t.variances))
    else:
        lines.append("target.kind = phi4")
        lines.append(f"target.sites = {t.N}")
        lines.append(f"target.m = {t.m!r}")
        lines.append(f"target.lambda = {t.lam!r}")
        lines.append(f"target.alpha = {t.alpha!r}")
    b = rc.base
    if isinstance(b, NormalBaseSpec):
        lines.append("base.kind = normal")
        lines.append(f"base.dim = {b.n}")
        lines.append(f"base.std = {b.std!r}")
    else:
        lines.append("base.kind = gengauss")
        lines.append(f"base.dim = {b.n}")
        lines.append(f"base.sigma = {b.sigma!r}")
        lines.append(f"base.p = {b.p!r}")
    lines.append(f"net.kernels = {rc.kernels}")
    lines.append(f"net.hidden_layers = {rc.hidden_layers}")
    lines.append(f"net.width = {rc.width}")
    if rc.bandwidth is not None:
        lines.append(f"net.bandwidth = {rc.bandwidth!r}")
    lines.append(f"interp.kind = {rc.interp_kind}")
    tr = rc.train
    lines.append(f"train.objective = {tr.objective}")
    lines.append(f"train.steps = {tr.steps}")
    lines.append(f"train.batch = {tr.batch}")
    lines.append(f"train.eval_batch = {tr.eval_batch}")
    lines.append(f"train.lr0 = {tr.lr0!r}")
    lines.append(f"train.penalty = {tr.penalty}")
    lines.append(f"train.penalty2 = {tr.penalty2}")
    lines.append(f"train.integration_steps = {tr.integration_steps}")
    lines.append(f"train.seed = {tr.seed}")
    lines.append(f"train.eval_every = {tr.eval_every}")
    lines.append(f"train.clip_norm = {tr.clip_norm!r}")
    lines.append(f"output.dir = {rc.outdir}")
    return "\n".join(lines) + "\n"


def make_model(rc):
    """FlowModel for a run: V always; C for residual objectives; f for the
    learned interpolation; D for the combined objective."""
    n = rc.n
    vspec = MlpSpec(n, n, rc.hidden_layers, rc.width)
    V = RbfTimeEnsemble(rc.kernels, vspec, rc.bandwidth)
    obj = rc.train.objective
    C = f = D = None
    if obj != "reverse_kl":
        C = TimeScalarHead(rc.kernels, rc.bandwidth)
    if rc.interp_kind == "learned":
        fspec = MlpSpec(n, 1, rc.hidden_layers, rc.width)
        f = RbfTimeEnsemble(rc.kernels, fspec, rc.bandwidth)
    if obj == "combined_appendix":
        D = TimeScalarHead(rc.kernels, rc.bandwidth)
    return FlowModel(n, V, C=C, f=f, D=D)


def make_interpolant(rc, model=None):
    model = model or make_model(rc)
    corr = model.f if rc.interp_kind == "learned" else None
    sig = rc.base.std if rc.interp_kind == "mixture_diffusion" else None
    return Interpolant(kind=rc.interp_kind, base=rc.base, target=rc.target,
                       correction=corr, sigma_base=sig)
