import os
from importlib import resources

import numpy as np
import pytest

from deformflow import cli, config, nets
from deformflow.config import (
    ConfigError,
    load_config,
    make_interpolant,
    make_model,
    parse_config,
    serialize_config,
)
from deformflow.energies import GenGaussianBaseSpec, NormalBaseSpec, Phi4Spec

MINIMAL = """
experiment.name = demo
target.kind = mixture
target.weights = 0.5,0.5
target.means = 2,2; -2,-2
target.variances = 1.0,1.0
base.kind = normal
base.dim = 2
base.std = 1.0
net.kernels = 2
net.hidden_layers = 1
net.width = 8
train.objective = deformation_linear
train.steps = 3
train.batch = 8
train.eval_batch = 32
train.integration_steps = 6
train.eval_every = 3
output.dir = out/demo
"""


def bundled(name):
    return resources.files("deformflow.configs").joinpath(name).read_text()


class TestParsing:
    def test_round_trip_identity(self):
        rc = parse_config(MINIMAL)
        rc2 = parse_config(serialize_config(rc))
        assert rc2 == rc
        assert serialize_config(rc2) == serialize_config(rc)

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="target.flavor"):
            parse_config(MINIMAL + "\ntarget.flavor = hot\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError, match="duplicate"):
            parse_config(MINIMAL + "\nbase.dim = 2\n")

    def test_negative_lambda_names_lambda(self):
        text = MINIMAL.replace("target.kind = mixture", "target.kind = phi4")
        text = "\n".join(l for l in text.splitlines()
                         if not l.startswith(("target.weights", "target.means", "target.variances")))
        text += "\ntarget.sites = 16\ntarget.m = 1.0\ntarget.lambda = -0.0625\ntarget.alpha = 0.01\n"
        text = text.replace("base.dim = 2", "base.dim = 16")
        with pytest.raises(ConfigError, match="lambda"):
            parse_config(text)

    def test_comments_and_blank_lines(self):
        rc = parse_config("# leading comment\n\n" + MINIMAL + "\n# trailing\n")
        assert rc.name == "demo"

    def test_missing_required_key(self):
        text = "\n".join(l for l in MINIMAL.splitlines() if not l.startswith("train.steps"))
        with pytest.raises(ConfigError, match="train.steps"):
            parse_config(text)

    def test_dimension_mismatch_detected(self):
        with pytest.raises(ConfigError, match="dim"):
            parse_config(MINIMAL.replace("base.dim = 2", "base.dim = 3"))


class TestBundledConfigs:
    def test_gaussian_mixture_rows_match_experiment_table(self):
        # K=4 kernels, 2x64 nets, batch 256 / eval 4096, 1e4 steps, lr 3e-3,
        # 50 integration steps, |E|+|E|^2 penalty; base N(0,1) resp. N(0,2)
        for name, base_std in [("gauss4_deform_linear.cfg", 1.0), ("gauss2_deform_learned.cfg", 2.0)]:
            rc = parse_config(bundled(name))
            assert rc.kernels == 4
            assert rc.hidden_layers == 2
            assert rc.width == 64
            assert isinstance(rc.base, NormalBaseSpec)
            assert rc.base.std == base_std
            assert rc.train.batch == 256
            assert rc.train.eval_batch == 4096
            assert rc.train.steps == 10000
            assert rc.train.lr0 == pytest.approx(3e-3)
            assert rc.train.integration_steps == 50
            assert rc.train.penalty == "abs_plus_square"

    def test_gauss4_target_is_the_symmetric_four_mode_mixture(self):
        rc = parse_config(bundled("gauss4_deform_linear.cfg"))
        assert np.allclose(rc.target.weights, 0.25)
        assert sorted(map(tuple, rc.target.means)) == [(-8, -8), (-8, 8), (8, -8), (8, 8)]
        assert np.allclose(rc.target.variances, 1.0)

    def test_gauss2_target_is_the_asymmetric_two_mode_mixture(self):
        rc = parse_config(bundled("gauss2_deform_learned.cfg"))
        assert np.allclose(rc.target.weights, (1 / 3, 2 / 3))
        assert list(map(tuple, rc.target.means)) == [(4, 4), (-8, -8)]

    def test_phi4_rows_match_experiment_table(self):
        for m_tag, m_val in [("025", 0.25), ("050", 0.5), ("075", 0.75), ("100", 1.0)]:
            rc = parse_config(bundled(f"phi4_m{m_tag}_deform_learned.cfg"))
            assert isinstance(rc.target, Phi4Spec)
            assert rc.target.N == 16
            assert rc.target.m == m_val
            assert rc.target.lam == pytest.approx(1 / 16)
            assert rc.target.alpha == pytest.approx(1e-2)
            assert isinstance(rc.base, GenGaussianBaseSpec)
            assert rc.base.sigma == 2.0 and rc.base.p == 4.0
            assert rc.kernels == 8
            assert rc.hidden_layers == 3
            assert rc.width == 128
            assert rc.train.steps == 10000
            assert rc.train.batch == 256

    def test_every_bundled_config_parses_and_round_trips(self):
        names = [p.name for p in resources.files("deformflow.configs").iterdir()
                 if p.name.endswith(".cfg")]
        assert len(names) == 14
        for name in names:
            rc = parse_config(bundled(name))
            assert parse_config(serialize_config(rc)) == rc

    def test_objective_interp_pairing(self):
        assert parse_config(bundled("gauss2_revkl.cfg")).train.objective == "reverse_kl"
        assert parse_config(bundled("gauss2_deform_diffusion.cfg")).interp_kind == "mixture_diffusion"
        assert parse_config(bundled("phi4_m100_deform_learned.cfg")).interp_kind == "learned"


def write_cfg(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path)


def small_cfg(tmp_path, outname="out", objective="deformation_linear", steps=3):
    text = MINIMAL.replace("train.objective = deformation_linear",
                           f"train.objective = {objective}")
    text = text.replace("train.steps = 3", f"train.steps = {steps}")
    text = text.replace("output.dir = out/demo", f"output.dir = {tmp_path}/{outname}")
    return write_cfg(tmp_path, text)


class TestCmdTrain:
    def test_artifacts_and_row_count(self, tmp_path, capsys):
        path = small_cfg(tmp_path, steps=4)
        code = cli.main(["train", path])
        assert code == 0
        out = tmp_path / "out"
        assert (out / "resolved.cfg").exists()
        assert (out / "ckpt_final.dflow").exists()
        lines = (out / "metrics.csv").read_text().splitlines()
        # steps/eval_every + 1 rows plus the header (eval at 0, 3, 4)
        assert lines[0].startswith("step,")
        assert [l.split(",")[0] for l in lines[1:]] == ["0", "3", "4"]

    def test_exit_1_on_bad_config(self, tmp_path, capsys):
        path = write_cfg(tmp_path, MINIMAL + "\nbogus.key = 1\n")
        assert cli.main(["train", path]) == 1
        assert "bogus.key" in capsys.readouterr().err

    def test_rerun_byte_identical(self, tmp_path):
        path = small_cfg(tmp_path, steps=3)
        cli.main(["train", path, "--output", str(tmp_path / "a")])
        cli.main(["train", path, "--output", str(tmp_path / "b")])
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


class TestCmdEval:
    def test_identity_checkpoint_on_matching_target(self, tmp_path, capsys):
        # target == base and a zeroed V: the identity flow gives ESS_r = 1
        text = MINIMAL.replace("target.kind = mixture", "target.kind = mixture") \
                      .replace("target.means = 2,2; -2,-2", "target.means = 0,0; 0,0") \
                      .replace("target.variances = 1.0,1.0", "target.variances = 1.0,1.0")
        path = write_cfg(tmp_path, text.replace("output.dir = out/demo", f"output.dir = {tmp_path}/ev"))
        rc = load_config(path)
        model = make_model(rc)
        store = model.template.copy()  # all parameters zero
        ck = tmp_path / "zero.dflow"
        nets.save_checkpoint(ck, store)
        code = cli.main(["eval", str(ck), path, "--n", "256", "--seed", "3"])
        assert code == 0
        out = capsys.readouterr().out.splitlines()
        fields = dict(zip(out[-2].split(","), out[-1].split(",")))
        assert float(fields["ess_r"]) == pytest.approx(1.0, abs=1e-6)
        assert (tmp_path / "ev" / "samples.csv").read_text().splitlines()[0] == "dim=2"

    def test_mixture_eval_populates_forward_metrics(self, tmp_path, capsys):
        path = small_cfg(tmp_path, outname="fwd")
        rc = load_config(path)
        model = make_model(rc)
        ck = tmp_path / "init.dflow"
        nets.save_checkpoint(ck, model.init_store(0))
        assert cli.main(["eval", str(ck), path, "--n", "64", "--seed", "1"]) == 0
        out = capsys.readouterr().out.splitlines()
        fields = dict(zip(out[-2].split(","), out[-1].split(",")))
        assert fields["fwd_kl"] != "" and fields["ess_f"] != ""

    def test_phi4_eval_writes_histogram(self, tmp_path):
        text = """
experiment.name = p4
target.kind = phi4
target.sites = 16
target.m = 1.0
target.lambda = 0.0625
target.alpha = 0.01
base.kind = gengauss
base.dim = 16
base.sigma = 2.0
base.p = 4.0
net.kernels = 2
net.hidden_layers = 1
net.width = 8
train.objective = deformation_learned
train.steps = 1
train.batch = 4
train.eval_batch = 16
train.integration_steps = 4
"""
        path = write_cfg(tmp_path, text + f"output.dir = {tmp_path}/p4\n")
        rc = load_config(path)
        model = make_model(rc)
        ck = tmp_path / "p4.dflow"
        nets.save_checkpoint(ck, model.init_store(0))
        assert cli.main(["eval", str(ck), path, "--n", "32"]) == 0
        hist = (tmp_path / "p4" / "mean_field_histogram.csv").read_text().splitlines()
        assert hist[0] == "bin_center,count,reference_density"

    def test_checkpoint_config_mismatch(self, tmp_path, capsys):
        path = small_cfg(tmp_path, outname="mm")
        other = config.parse_config(MINIMAL.replace("net.width = 8", "net.width = 16")
                                    .replace("output.dir = out/demo", f"output.dir = {tmp_path}/mm2"))
        store = make_model(other).init_store(0)
        ck = tmp_path / "mismatch.dflow"
        nets.save_checkpoint(ck, store)
        assert cli.main(["eval", str(ck), path]) == 1
        assert "slice table" in capsys.readouterr().err


class TestCmdDumps:
    def test_dump_interp_boundary_rows(self, tmp_path):
        path = small_cfg(tmp_path, outname="di")
        assert cli.main(["dump-interp", path, "--grid=-2,2,4", "--times", "0,1"]) == 0
        lines = (tmp_path / "di" / "interp_grid.csv").read_text().splitlines()
        assert lines[0] == "t,x1,x2,f,density"
        rows = [l.split(",") for l in lines[1:]]
        rc = load_config(path)
        from deformflow import energies

        for r in rows:
            t, x1, x2, f, dens = map(float, r)
            spec = rc.base if t == 0.0 else rc.target
            assert f == pytest.approx(energies.energy(spec, np.array([x1, x2])), rel=1e-12)
            assert dens == pytest.approx(np.exp(-f), rel=1e-12)

    def test_dump_interp_diffusion_components(self, tmp_path):
        text = MINIMAL.replace("train.objective = deformation_linear",
                               "train.objective = deformation_diffusion_closed_form")
        path = write_cfg(tmp_path, text.replace("output.dir = out/demo", f"output.dir = {tmp_path}/dc"))
        assert cli.main(["dump-interp", path, "--grid=-1,1,2", "--times", "0.25"]) == 0
        lines = (tmp_path / "dc" / "interp_components.csv").read_text().splitlines()
        assert lines[0] == "t,component,weight,mean1,mean2,variance"
        assert len(lines) == 3

    def test_grid_size_refusal(self, tmp_path, capsys):
        path = small_cfg(tmp_path, outname="big")
        assert cli.main(["dump-interp", path, "--grid=-1,1,4000", "--times", "0"]) == 1
        assert "1e7" in capsys.readouterr().err

    def test_dump_traj_files(self, tmp_path):
        path = small_cfg(tmp_path, outname="tr")
        rc = load_config(path)
        ck = tmp_path / "tr.dflow"
        nets.save_checkpoint(ck, make_model(rc).init_store(0))
        assert cli.main(["dump-traj", str(ck), path, "--count", "3"]) == 0
        for b in range(3):
            lines = (tmp_path / "tr" / f"traj_{b:03d}.csv").read_text().splitlines()
            assert lines[0] == "t,x1,x2"
            assert len(lines) == 1 + 7  # S=6 integration -> 7 grid points
