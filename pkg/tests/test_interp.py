import numpy as np
import pytest

from deformflow import energies, engine, interp, nets
from deformflow.energies import GaussianMixtureSpec, NormalBaseSpec
from deformflow.engine import FDConfig
from deformflow.interp import (
    Interpolant,
    InterpError,
    diffused_mixture,
    diffusion_density_residual,
    diffusion_dt_density,
    f_eval,
    interpolation_error,
)
from deformflow.nets import FlowModel, MlpSpec, RbfTimeEnsemble, TimeScalarHead

EQ10 = GaussianMixtureSpec(weights=(1 / 3, 2 / 3), means=((4.0, 4.0), (-8.0, -8.0)), variances=(1.0, 1.0))
BASE2 = NormalBaseSpec(2, 2.0)


def learned_setup(seed=0, scale=0.3):
    model = FlowModel(
        2,
        V=RbfTimeEnsemble(3, MlpSpec(2, 2, 1, 8)),
        C=TimeScalarHead(3),
        f=RbfTimeEnsemble(3, MlpSpec(2, 1, 1, 8)),
        D=TimeScalarHead(3),
    )
    store = model.init_store(seed)
    store.values[:] *= scale
    itp = Interpolant("learned", BASE2, EQ10, correction=model.f)
    return model, store, itp


def random_mixture(rng, n):
    k = rng.integers(1, 4)
    w = rng.random(k) + 0.2
    w /= w.sum()
    # exact weight normalization for the validator
    w[-1] = 1.0 - w[:-1].sum()
    means = tuple(tuple(rng.uniform(-6, 6, n)) for _ in range(k))
    variances = tuple(rng.uniform(0.3, 3.0, k))
    return GaussianMixtureSpec(weights=tuple(w), means=means, variances=variances)


class TestBoundaries:
    @pytest.mark.parametrize("kind", ["linear", "learned", "mixture_diffusion"])
    def test_endpoints_match_base_and_target(self, kind):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((12, 2)) * 3
        model = store = None
        if kind == "learned":
            model, store, itp = learned_setup()
            params = store.values
        else:
            itp = Interpolant(kind, BASE2, EQ10)
            params = None
        f0 = np.asarray(f_eval(itp, 0.0, x, model, params))
        f1 = np.asarray(f_eval(itp, 1.0, x, model, params))
        assert np.allclose(f0, energies.energy_value(BASE2, x), rtol=0, atol=1e-12)
        assert np.allclose(f1, energies.energy_value(EQ10, x), rtol=0, atol=1e-12)

    def test_linear_midpoint(self):
        itp = Interpolant("linear", BASE2, EQ10)
        x = np.array([[1.0, -1.0]])
        mid = f_eval(itp, 0.5, x)
        f0 = energies.energy_value(BASE2, x)
        f1 = energies.energy_value(EQ10, x)
        assert np.allclose(mid, 0.5 * (f0 + f1), rtol=1e-15)

    def test_learned_correction_vanishes_at_boundaries_for_any_theta(self):
        model, store, itp = learned_setup(seed=3, scale=5.0)
        lin = Interpolant("linear", BASE2, EQ10)
        x = np.random.default_rng(1).standard_normal((6, 2)) * 4
        for t in (0.0, 1.0):
            a = np.asarray(f_eval(itp, t, x, model, store.values))
            b = np.asarray(f_eval(lin, t, x))
            assert np.array_equal(a, b)


class TestDiffusedMixture:
    def test_component_parameters(self):
        mix = GaussianMixtureSpec(weights=(1.0,), means=((8.0, 8.0),), variances=(1.0,))
        spec = diffused_mixture(mix, 2.0, 0.25)
        assert np.allclose(spec.means, [(4.0, 4.0)])
        assert np.allclose(spec.variances, [0.25 * 1.0 + 4.0 * 0.75])
        assert spec.variances[0] == pytest.approx(3.25)

    def test_t1_recovers_target_and_t0_the_base(self):
        spec1 = diffused_mixture(EQ10, 2.0, 1.0)
        assert np.allclose(spec1.means, EQ10.means)
        assert np.allclose(spec1.variances, EQ10.variances)
        assert np.allclose(spec1.weights, EQ10.weights)
        spec0 = diffused_mixture(EQ10, 2.0, 0.0)
        assert np.allclose(spec0.means, np.zeros((2, 2)))
        assert np.allclose(spec0.variances, [4.0, 4.0])

    def test_against_numerical_convolution_1d(self):
        # stretch-then-convolve computed by quadrature matches the closed form
        mix = GaussianMixtureSpec(weights=(1.0,), means=((8.0,),), variances=(1.0,))
        sigma, t = 2.0, 0.4
        grid = np.linspace(-25, 25, 20001)
        h = grid[1] - grid[0]
        stretched = t**-0.5 * np.exp(-((grid / np.sqrt(t) - 8.0) ** 2) / 2.0) / np.sqrt(2 * np.pi)
        kvar = sigma**2 * (1 - t)
        xq = np.linspace(-10, 14, 25)
        num = np.empty_like(xq)
        for i, xv in enumerate(xq):
            kern = np.exp(-((xv - grid) ** 2) / (2 * kvar)) / np.sqrt(2 * np.pi * kvar)
            num[i] = np.sum(stretched * kern) * h
        closed = np.exp(energies.log_density_exact(diffused_mixture(mix, sigma, t), xq[:, None]))
        assert np.allclose(num, closed, atol=1e-6)


class TestDerivatives:
    def test_linear_time_partial_is_energy_difference(self):
        itp = Interpolant("linear", BASE2, EQ10)
        x = np.random.default_rng(2).standard_normal((9, 2)) * 3
        dtf, _ = interp.derivatives(itp, 0.3, x)
        expect = energies.energy_value(EQ10, x) - energies.energy_value(BASE2, x)
        assert np.allclose(dtf, expect, rtol=1e-14)

    def test_learned_with_zero_correction_matches_linear(self):
        model, store, itp = learned_setup()
        store.values[:] = 0.0
        lin = Interpolant("linear", BASE2, EQ10)
        x = np.random.default_rng(3).standard_normal((7, 2))
        dtf_l, grad_l = interp.derivatives(itp, 0.6, x, model, store.values)
        dtf_0, grad_0 = interp.derivatives(lin, 0.6, x)
        assert np.allclose(np.asarray(dtf_l), dtf_0, atol=1e-6)
        assert np.allclose(np.asarray(grad_l), grad_0, atol=1e-6)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_diffusion_derivatives_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        itp = Interpolant("mixture_diffusion", BASE2, EQ10)
        # small fixed steps keep the difference-quotient oracle sharp near the
        # responsibility watershed of the mixture
        cfg = FDConfig(h_space=1e-4, h_time=1e-5, scale_space=False)
        for _ in range(50):
            t = rng.uniform(0.05, 0.95)
            x = rng.uniform(-9, 5, (1, 2))
            dtf, gradf = interp.derivatives(itp, t, x)
            fd_t = engine.fd_time_partial(lambda tau: np.asarray(f_eval(itp, tau, x)), t, cfg)
            fd_x = engine.fd_space_grad(lambda rows: np.asarray(f_eval(itp, t, rows)), x, cfg)
            assert dtf[0] == pytest.approx(fd_t[0], rel=1e-5, abs=1e-5)
            assert np.allclose(gradf, fd_x, rtol=1e-5, atol=1e-5)

    def test_learned_derivatives_match_finite_differences(self):
        model, store, itp = learned_setup(seed=5, scale=0.5)
        rng = np.random.default_rng(4)
        cfg = FDConfig()
        for t in (0.31, 0.77):
            x = rng.standard_normal((5, 2))
            dtf, gradf = interp.derivatives(itp, t, x, model, store.values, cfg)
            fd_t = engine.fd_time_partial(
                lambda tau: np.asarray(f_eval(itp, tau, x, model, store.values)), t, cfg)
            fd_x = engine.fd_space_grad(
                lambda rows: np.asarray(f_eval(itp, t, rows, model, store.values)), x, cfg)
            assert np.allclose(np.asarray(dtf), fd_t, rtol=1e-6, atol=1e-6)
            assert np.allclose(np.asarray(gradf), fd_x, rtol=1e-4, atol=1e-6)

    def test_derivatives_flat_consistent_with_pointwise(self):
        model, store, itp = learned_setup(seed=6, scale=0.4)
        rng = np.random.default_rng(5)
        B = 4
        times = np.linspace(0, 1, 9)
        states = [rng.standard_normal((B, 2)) for _ in times]
        flat = np.concatenate(states)
        dtf, gradf = interp.derivatives_flat(itp, times, B, flat, model, store.values)
        for k, t in enumerate(times):
            d_k, g_k = interp.derivatives(itp, t, states[k], model, store.values)
            assert np.allclose(np.asarray(dtf)[k * B:(k + 1) * B], np.asarray(d_k), atol=1e-12)
            assert np.allclose(np.asarray(gradf)[k * B:(k + 1) * B], np.asarray(g_k), atol=1e-12)


class TestDiffusionPDE:
    def test_residual_vanishes_for_random_mixtures(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            n = int(rng.integers(1, 3))
            mix = random_mixture(rng, n)
            sigma = rng.uniform(0.5, 3.0)
            for _ in range(100):
                t = rng.uniform(0.1, 1.0)
                x = rng.uniform(-8, 8, (1, n))
                resid = diffusion_density_residual(mix, sigma, t, x)
                scale = max(abs(diffusion_dt_density(mix, sigma, t, x)[0]), 1e-12)
                assert abs(resid[0]) < 1e-8 * scale

    def test_stationary_single_component(self):
        # zero-mean component with matching variance: p_t is constant in t
        mix = GaussianMixtureSpec(weights=(1.0,), means=((0.0, 0.0),), variances=(4.0,))
        x = np.random.default_rng(11).standard_normal((20, 2))
        assert np.abs(diffusion_dt_density(mix, 2.0, 0.5, x)).max() < 1e-15
        assert np.abs(diffusion_density_residual(mix, 2.0, 0.5, x)).max() < 1e-15

    def test_gradient_term_vanishes_at_origin_by_symmetry(self):
        mix = GaussianMixtureSpec(weights=(0.5, 0.5), means=((3.0,), (-3.0,)), variances=(1.0, 1.0))
        x = np.zeros((1, 1))
        parts = interp._diffusion_parts(mix, 1.5, 0.7, x)
        grad_p = -(parts["w"][None, :, None] * parts["gs"][:, :, None] * parts["d"]
                   / parts["v"][None, :, None]).sum(axis=1)
        assert abs((grad_p * x).sum()) == 0.0

    def test_singular_at_zero(self):
        with pytest.raises(InterpError):
            diffusion_density_residual(EQ10, 2.0, 0.0, np.zeros((1, 2)))


class TestInterpolationError:
    def test_exact_diffusion_solves_the_boltzmann_pde(self):
        # closed-form diffusion path with D_t = -(n - 2t d/dt log Z_t): the
        # boundary-normalizing shift -(1-t) c on the energy makes
        # d/dt log Z_t = -c with c = (n/2) log(2 pi sigma^2)
        itp = Interpolant("mixture_diffusion", BASE2, EQ10)
        n, sigma = 2, 2.0
        c = 0.5 * n * np.log(2 * np.pi * sigma**2)
        D = lambda t: -(n + 2 * t * c)
        rng = np.random.default_rng(12)
        for t in (0.2, 0.5, 0.9):
            x = rng.uniform(-6, 6, (8, 2))
            resid = interpolation_error(itp, D, t, x, sigma=sigma)
            assert np.abs(np.asarray(resid)).max() < 1e-3

    def test_static_gaussian_needs_d_equal_minus_n(self):
        base = NormalBaseSpec(2, 1.3)
        itp = Interpolant("linear", base, base)  # f_t = f_0 for all t
        x = np.random.default_rng(13).standard_normal((10, 2))
        resid = interpolation_error(itp, lambda t_: -2.0, 0.4, x, sigma=1.3)
        assert np.abs(np.asarray(resid)).max() < 1e-6
        off = interpolation_error(itp, lambda t_: 0.0, 0.4, x, sigma=1.3)
        assert np.allclose(np.asarray(off), 2.0, atol=1e-6)

    def test_advection_term_zero_at_origin(self):
        base = NormalBaseSpec(2, 1.0)
        itp = Interpolant("linear", base, base)
        x = np.zeros((1, 2))
        resid = interpolation_error(itp, lambda t_: 0.0, 0.5, x, sigma=1.0)
        # at x = 0 only the Laplacian term survives: sigma^2 * n / sigma^2
        assert resid[0] == pytest.approx(2.0, abs=1e-6)


class TestMassTransport:
    def grid_mode_masses(self, itp, t, model=None, params=None):
        g = np.linspace(-16.0, 12.0, 281)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        dens = np.exp(-np.asarray(f_eval(itp, t, pts, model, params))).reshape(281, 281)
        # Voronoi split between the two mode centers
        d_near = ((pts - np.array([4.0, 4.0])) ** 2).sum(axis=1)
        d_far = ((pts - np.array([-8.0, -8.0])) ** 2).sum(axis=1)
        mask = (d_near < d_far).reshape(281, 281)
        m_near = (dens * mask).sum()
        total = dens.sum()
        return m_near / total

    def test_linear_interpolation_teleports_mass(self):
        itp = Interpolant("linear", BASE2, EQ10)
        end = self.grid_mode_masses(itp, 1.0)
        assert end == pytest.approx(1 / 3, abs=0.01)
        dev = max(abs(self.grid_mode_masses(itp, t) - end) for t in np.linspace(0.05, 0.95, 10))
        assert dev > 0.10  # the documented failure mode of the linear path

    def test_diffusion_keeps_component_weights(self):
        for t in np.linspace(0.0, 1.0, 7):
            spec = diffused_mixture(EQ10, 2.0, t)
            assert np.array_equal(spec.weights, EQ10.weights)


class TestValidation:
    def test_diffusion_requires_mixture_target(self):
        with pytest.raises(InterpError):
            Interpolant("mixture_diffusion", BASE2, NormalBaseSpec(2, 1.0))

    def test_diffusion_requires_matching_sigma(self):
        with pytest.raises(InterpError):
            Interpolant("mixture_diffusion", BASE2, EQ10, sigma_base=1.0)

    def test_learned_requires_correction(self):
        with pytest.raises(InterpError):
            Interpolant("learned", BASE2, EQ10)

    def test_dimension_mismatch(self):
        with pytest.raises(InterpError):
            Interpolant("linear", NormalBaseSpec(3, 1.0), EQ10)
