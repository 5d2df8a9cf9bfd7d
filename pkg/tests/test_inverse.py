from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parainverse.carleman import CarlemanParams
from parainverse.forward import SourceFactor, default_problem, observe, solve, time_derivative
from parainverse.grid import Grid
from parainverse.inverse import (
    DegenerateRegression,
    ReconstructionConfig,
    data_norm,
    direct_slice,
    forward_misfit,
    gradient_f,
    kappa_fit,
    omega0_mask,
    reconstruct,
    reconstruct_batch,
    relative_error,
    stack_observations,
)


def slice_error(cells, dt, linear=False):
    g = Grid.uniform(cells)
    spec = default_problem(g, dt=dt, linear=linear)
    u = solve(spec, dt=dt)
    f = direct_slice(u.at(spec.t0), time_derivative(u).at(spec.t0), spec)
    return float(relative_error(f, spec.f_true, omega0_mask(g, spec.faces)))


@pytest.fixture(scope="module")
def small():
    """64-cell nonlinear problem with clean data, cheap enough for gradient checks."""
    g = Grid.uniform(64)
    spec = default_problem(g, dt=4e-4)
    u = solve(spec, dt=4e-4)
    return spec, u, observe(u, spec, 0.0), ReconstructionConfig(dt=4e-4, gamma=1e-6)


class TestOmega0:
    def test_margin_away_from_unobserved_face(self):
        g = Grid.uniform(64)
        x = g.coords()[0]
        m = omega0_mask(g, ["x1+"], 0.1)
        assert np.array_equal(m, x > 0.1)

    def test_fully_observed_is_everything(self):
        g = Grid.uniform(64)
        assert np.all(omega0_mask(g, ["x1-", "x1+"], 0.3))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 0.45), st.integers(0, 2 ** 16))
    def test_subdomain_norm_not_larger(self, margin, seed):
        g = Grid.uniform(64)
        rng = np.random.default_rng(seed)
        f, ref = rng.standard_normal((2,) + g.shape)
        m = omega0_mask(g, ["x1+"], margin)
        full = np.ones(g.shape, bool)
        assert np.linalg.norm(np.where(m, f, 0)) <= np.linalg.norm(np.where(full, f, 0))
        assert relative_error(ref, ref, m) == 0.0


class TestDirectSlice:
    def test_noiseless_within_two_percent(self, nonlinear_run):
        spec, u = nonlinear_run
        f = direct_slice(u.at(spec.t0), time_derivative(u).at(spec.t0), spec)
        assert relative_error(f, spec.f_true, omega0_mask(spec.grid, spec.faces)) <= 0.02

    def test_zero_case(self, grid):
        spec = default_problem(grid, eps=0.0)
        u = solve(spec)
        assert not np.any(direct_slice(u.at(spec.t0), time_derivative(u).at(spec.t0), spec))

    def test_converges_under_refinement(self):
        # h halves and dt quarters; the error is first order in dt, so each step gains about 4x.
        errs = np.array([slice_error(c, dt) for c, dt in ((64, 4e-4), (128, 1e-4), (256, 2.5e-5))])
        assert np.all(errs[:-1] / errs[1:] >= 3.6)

    def test_linear_not_worse(self):
        assert slice_error(64, 4e-4, linear=True) <= 1.05 * slice_error(64, 4e-4)

    def test_source_floor_violation(self, nonlinear_run):
        spec, u = nonlinear_run
        # Construction validates the floor too, so mutate a valid copy afterwards.
        bad = replace(spec)
        bad.source = SourceFactor(0.3 * spec.source.base, spec.source.slope, spec.source.t0)
        with pytest.raises(ValueError, match="floor"):
            direct_slice(u.at(spec.t0), time_derivative(u).at(spec.t0), bad)

    def test_reconstruct_needs_solution(self, nonlinear_run):
        spec, u = nonlinear_run
        with pytest.raises(ValueError):
            reconstruct(spec, observe(u, spec), ReconstructionConfig(method="direct_slice"))


class TestMisfit:
    def test_floor_at_truth(self, small):
        spec, _, data, cfg = small
        assert forward_misfit(spec.f_true, spec, data, replace(cfg, gamma=0.0)) <= 1e-20

    def test_zero_problem_zero_misfit(self, small):
        spec, u, _, cfg = small
        spec = spec.scaled(0.0)
        zero = observe(u.with_frames(0 * u.frames), spec)
        assert forward_misfit(np.zeros(spec.grid.shape), spec, zero, cfg) == 0.0

    def test_descends_along_negative_gradient(self, small):
        spec, _, data, cfg = small
        f = np.zeros(spec.grid.shape)
        g = gradient_f(f, spec, data, cfg)
        step = 1e-3 / np.max(np.abs(g))
        assert forward_misfit(f - step * g, spec, data, cfg) < forward_misfit(f, spec, data, cfg)

    @pytest.mark.parametrize("weighted", [False, True])
    def test_gradient_matches_finite_differences(self, small, weighted):
        spec, _, data, cfg = small
        grid = spec.grid
        if weighted:
            cfg = replace(cfg, carleman_weighting=CarlemanParams.default(grid, spec.t0, 2.0, 1.0, 2.0))
        rng = np.random.default_rng(11)
        f = 0.5 * spec.f_true
        g = gradient_f(f, spec, data, cfg)
        h = 1e-5
        for _ in range(10):
            d = rng.standard_normal(grid.shape)
            fd = (forward_misfit(f + h * d, spec, data, cfg) - forward_misfit(f - h * d, spec, data, cfg)) / (2 * h)
            ad = np.sum(g * d) * grid.cell_volume
            assert abs(fd - ad) <= 1e-3 * abs(ad)

    def test_gradient_zero_at_zero_data(self, small):
        spec, u, _, cfg = small
        spec = spec.scaled(0.0)
        zero = observe(u.with_frames(0 * u.frames), spec)
        assert not np.any(gradient_f(np.zeros(spec.grid.shape), spec, zero, cfg))


class TestDataNorm:
    def test_zero_difference(self, small):
        spec, _, data, _ = small
        assert data_norm(data, spec.grid, data) == 0.0

    def test_batched_matches_single(self, small):
        spec, u, _, _ = small
        obs = [observe(u, spec, 0.01, s) for s in range(3)]
        batch = data_norm(stack_observations(obs), spec.grid)
        single = [data_norm(o, spec.grid) for o in obs]
        np.testing.assert_allclose(batch, single, rtol=1e-12)


class TestTikhonov:
    def test_linear_noiseless(self, linear_run):
        spec, u = linear_run
        res = reconstruct(spec, observe(u, spec), ReconstructionConfig())
        assert res.error_L2_omega0 <= 0.05
        assert np.all(np.diff(res.misfit_history) <= 0)

    def test_nonlinear_noiseless(self, nonlinear_run):
        spec, u = nonlinear_run
        res = reconstruct(spec, observe(u, spec), ReconstructionConfig())
        assert res.error_L2_omega0 <= 0.05
        assert np.all(np.diff(res.misfit_history) <= 0)

    def test_zero_data_gives_zero(self, grid):
        spec = default_problem(grid, eps=0.0)
        res = reconstruct(spec, observe(solve(spec), spec), ReconstructionConfig(gamma=1e-6))
        assert not np.any(res.f_rec)

    def test_larger_noise_larger_error(self, small):
        spec, u, _, cfg = small
        obs = [observe(u, spec, lev, s) for lev in (0.01, 0.04) for s in range(20)]
        gam = np.repeat([0.1 * 0.01, 0.1 * 0.04], 20)
        res = reconstruct_batch(spec, stack_observations(obs), cfg, f_true=spec.f_true, gamma=gam)
        err = np.array([r.error_L2_omega0 for r in res]).reshape(2, 20)
        assert np.median(err[1]) > np.median(err[0])

    def test_batch_only_for_tikhonov(self, small):
        spec, _, data, _ = small
        with pytest.raises(ValueError):
            reconstruct_batch(spec, data, ReconstructionConfig(method="direct_slice"))


class TestKappa:
    def test_all_zero_ladder(self, small):
        spec, _, _, cfg = small
        with pytest.raises(DegenerateRegression):
            kappa_fit(spec, cfg, [0.0, 0.0], range(3))

    def test_single_level(self, small):
        spec, _, _, cfg = small
        with pytest.raises(DegenerateRegression):
            kappa_fit(spec, cfg, [0.01], range(3))

    def test_unknown_gamma_rule(self, small):
        spec, _, _, cfg = small
        with pytest.raises(ValueError):
            kappa_fit(spec, cfg, [0.01, 0.02], range(3), gamma_rule="adaptive")


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"method": "newton"}, {"gamma": -1.0}, {"max_iters": -1},
        {"omega0_margin": 1.0}, {"preconditioner": "jacobi"}, {"time_h1_weight": -1e-3},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            ReconstructionConfig(**kw)
