import numpy as np
import pytest

from deformflow import energies, trainkit
from deformflow.energies import NormalBaseSpec
from deformflow.interp import Interpolant
from deformflow.nets import FlowModel, MlpSpec, RbfTimeEnsemble, TimeScalarHead
from deformflow.trainkit import OptimizerState, TrainConfig, adam_step, lr_schedule, train


def tiny_setup(objective="reverse_kl", steps=5, n=1, seed=0, batch=16, eval_batch=64):
    model = FlowModel(
        n,
        V=RbfTimeEnsemble(2, MlpSpec(n, n, 1, 8)),
        C=TimeScalarHead(2) if objective != "reverse_kl" else None,
    )
    base = NormalBaseSpec(n, 1.0)
    # target = base, expressed unnormalized: the optimum of the reverse KL is
    # the negative base log-partition
    itp = Interpolant("linear", base, base)
    tcfg = TrainConfig(objective=objective, steps=steps, batch=batch, eval_batch=eval_batch,
                       integration_steps=6, seed=seed, eval_every=1000)
    return model, itp, tcfg


class TestSchedule:
    def test_initial_value(self):
        cfg = TrainConfig(objective="reverse_kl", steps=1000, batch=8, lr0=3e-3)
        assert lr_schedule(0, cfg) == pytest.approx(3e-3)

    def test_anneals_to_zero(self):
        cfg = TrainConfig(objective="reverse_kl", steps=1000, batch=8, lr0=3e-3)
        assert lr_schedule(1000, cfg) == pytest.approx(0.0, abs=1e-18)

    def test_cosine_midpoint(self):
        cfg = TrainConfig(objective="reverse_kl", steps=1000, batch=8, lr0=3e-3)
        assert lr_schedule(500, cfg) == pytest.approx(1.5e-3)

    def test_out_of_range(self):
        cfg = TrainConfig(objective="reverse_kl", steps=10, batch=8)
        with pytest.raises(ValueError):
            lr_schedule(11, cfg)


class TestAdam:
    def test_zero_gradient_leaves_theta(self):
        theta = np.array([1.0, -2.0])
        st = OptimizerState.fresh(2)
        st.m[:] = 0.3
        theta2, st = adam_step(theta, np.zeros(2), st, 0.1)
        # moments decay but theta moves only through the decayed first moment
        assert st.m[0] == pytest.approx(0.27)
        theta_ref = theta - 0.1 * (st.m / (1 - 0.9)) / (np.sqrt(st.v / (1 - 0.999)) + st.eps)
        assert np.allclose(theta2, theta_ref)

    def test_strictly_zero_history_is_fixed_point(self):
        theta = np.array([1.0, -2.0])
        st = OptimizerState.fresh(2)
        theta2, _ = adam_step(theta, np.zeros(2), st, 0.1)
        assert np.array_equal(theta2, theta)

    def test_unit_step_property(self):
        # constant gradient: bias correction makes the step -lr * g/(|g| + eps)
        theta = np.zeros(2)
        st = OptimizerState.fresh(2)
        g = np.array([0.5, -3.0])
        lr = 0.01
        prev = theta.copy()
        for _ in range(50):
            theta, st = adam_step(theta, g, st, lr)
            step = np.abs(theta - prev)
            prev = theta.copy()
            assert np.all(np.abs(step - lr) < 0.01 * lr)

    def test_hand_computed_first_step(self):
        st = OptimizerState.fresh(2)
        g = np.array([1.0, -2.0])
        lr = 0.05
        theta, st = adam_step(np.zeros(2), g, st, lr)
        expect = -lr * g / (np.abs(g) + st.eps)
        assert np.allclose(theta, expect, rtol=1e-12)

    def test_non_finite_gradient_rejected(self):
        st = OptimizerState.fresh(1)
        with pytest.raises(trainkit.TrainError):
            adam_step(np.zeros(1), np.array([np.nan]), st, 0.1)


class TestTrainLoop:
    def test_zero_steps_returns_initial_parameters(self):
        model, itp, tcfg = tiny_setup(steps=0)
        store, history = train(model, itp, tcfg)
        assert np.array_equal(store.values, model.init_store(tcfg.seed).values)
        assert len(history) == 1
        assert history[0].step == 0

    def test_identity_fit_reaches_analytic_optimum(self):
        model, itp, tcfg = tiny_setup(objective="reverse_kl", steps=200, batch=32, eval_batch=512)
        store, history = train(model, itp, tcfg)
        assert history[-1].rev_kl_minus_logZ == pytest.approx(-0.5 * np.log(2 * np.pi), abs=0.05)

    def test_bit_identical_reruns(self):
        model, itp, tcfg = tiny_setup(objective="deformation_linear", steps=8)
        s1, h1 = train(model, itp, tcfg)
        s2, h2 = train(model, itp, tcfg)
        assert np.array_equal(s1.values, s2.values)
        for a, b in zip(h1, h2):
            assert a.csv_row() == b.csv_row()

    def test_eval_cadence_row_count(self):
        model, itp, tcfg = tiny_setup(steps=6)
        tcfg = TrainConfig(objective="reverse_kl", steps=6, batch=8, eval_batch=32,
                           integration_steps=6, seed=0, eval_every=3)
        _, history = train(model, itp, tcfg)
        assert [r.step for r in history] == [0, 3, 6]

    def test_loss_decreases_on_average(self):
        model, itp, tcfg = tiny_setup(objective="deformation_linear", steps=60, batch=16)
        losses = []
        orig = trainkit.objectives.loss_and_grad

        def spy(*a, **k):
            out = orig(*a, **k)
            losses.append(out[0])
            return out

        trainkit.objectives.loss_and_grad = spy
        try:
            train(model, itp, tcfg)
        finally:
            trainkit.objectives.loss_and_grad = orig
        first = np.median(losses[:6])
        last = np.median(losses[-6:])
        assert last < first

    def test_checkpoints_and_metrics_written(self, tmp_path):
        model, itp, tcfg = tiny_setup(steps=4)
        tcfg = TrainConfig(objective="reverse_kl", steps=4, batch=8, eval_batch=32,
                           integration_steps=6, seed=0, eval_every=2)
        train(model, itp, tcfg, outdir=str(tmp_path))
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "ckpt_000000.dflow").exists()
        assert (tmp_path / "ckpt_000004.dflow").exists()
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert len(lines) == 1 + 3  # header + evals at steps 0, 2, 4

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(objective="nope", steps=1, batch=1)
        with pytest.raises(ValueError):
            TrainConfig(objective="reverse_kl", steps=1, batch=0)
        with pytest.raises(ValueError):
            TrainConfig(objective="reverse_kl", steps=1, batch=1, lr0=0.0)
        with pytest.raises(ValueError):
            TrainConfig(objective="reverse_kl", steps=1, batch=1, penalty="nope")
