import numpy as np
import pytest

from parainverse.carleman import (
    CarlemanParams,
    WeightOverflow,
    build_weights,
    carleman_ratio,
    carleman_sweep,
    conjugated_operator,
    conjugation_defect,
    perturbed_ratio,
    perturbed_sweep,
    sweep_growth,
    test_ensemble as make_ensemble,
)
from parainverse.forward import default_problem, solve, time_derivative, time_derivative_frames
from parainverse.grid import Grid, SpaceTimeField, fd_laplacian

T0 = 0.5


def window(dt=1e-4, delta=0.1):
    n = int(round(2 * delta / dt))
    return T0 - delta + dt * np.arange(n + 1)


@pytest.fixture(scope="module")
def g():
    return Grid.uniform(256)


@pytest.fixture(scope="module")
def params(g):
    return CarlemanParams.default(g, T0, lam_c=2.0, beta=1.0, s_c=4.0)


class TestWeights:
    def test_at_t0(self, g, params):
        wp = build_weights(params, g, np.array([T0 - 0.01, T0, T0 + 0.01]))
        assert np.array_equal(wp.phi.frames[1], np.exp(params.lam_c * params.d_fn))

    def test_flat_d(self, g):
        p = CarlemanParams(g, np.zeros(g.shape), 2.0, 1.0, 4.0, T0)
        times = window(1e-3)
        wp = build_weights(p, g, times)
        expected = np.exp(-2.0 * (times - T0) ** 2)
        np.testing.assert_allclose(wp.phi.frames, np.broadcast_to(expected[:, None], wp.phi.frames.shape), rtol=1e-15)

    def test_time_derivative_identity(self, g, params):
        errs = []
        for dt in (4e-3, 2e-3, 1e-3):
            wp = build_weights(params, g, window(dt))
            fd = time_derivative_frames(wp.phi.frames, dt)
            errs.append(np.max(np.abs(fd[1:-1] - wp.phi_t[1:-1])))
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders > 1.9)

    def test_space_gradient_identity(self, g, params):
        wp = build_weights(params, g, window(1e-2))
        fd = np.gradient(wp.phi.frames, g.coords()[0], axis=1, edge_order=2)
        np.testing.assert_allclose(fd[:, 2:-2], wp.grad_phi[0][:, 2:-2], rtol=1e-3)

    def test_peak_in_time_at_t0(self, g, params):
        times = window(1e-3)
        wp = build_weights(params, g, times)
        assert np.all(times[np.argmax(wp.phi.frames, axis=0)] == T0)

    def test_weight_at_least_one(self, g, params):
        wp = build_weights(params, g, window(1e-3))
        assert np.all(wp.log_w >= 0)

    def test_overflow_guard(self, g):
        p = CarlemanParams.default(g, T0, lam_c=5.0, s_c=10.0)
        with pytest.raises(WeightOverflow):
            build_weights(p, g, window(1e-3))

    def test_parameter_checks(self, g):
        with pytest.raises(ValueError):
            CarlemanParams.default(g, T0, lam_c=0.5)
        with pytest.raises(ValueError):
            CarlemanParams(g, -np.ones(g.shape))


class TestConjugation:
    def test_zero_weight_parameter(self, g, params):
        (v,) = make_ensemble(g, window(1e-3), 1)
        out = conjugated_operator(v, params.with_s(0.0)).frames
        expected = time_derivative_frames(v.frames, v.dt) - fd_laplacian(g, v.frames)
        assert np.array_equal(out, expected)

    def test_zero_field(self, g, params):
        times = window(1e-3)
        v = SpaceTimeField(g, times, np.zeros((times.size,) + g.shape))
        assert not np.any(conjugated_operator(v, params).frames)

    def test_identity_converges(self):
        defects = []
        for cells, dt in ((64, 4e-4), (128, 2e-4), (256, 1e-4)):
            grid = Grid.uniform(cells)
            p = CarlemanParams.default(grid, T0, 2.0, 1.0, 4.0)
            (v,) = make_ensemble(grid, window(dt), 1)
            defects.append(conjugation_defect(v, p))
        orders = np.log2(np.array(defects[:-1]) / np.array(defects[1:]))
        assert np.all(orders >= 0.9)


class TestRatio:
    def test_zero_is_skipped(self, g, params):
        times = window(1e-3)
        v = SpaceTimeField(g, times, np.zeros((times.size,) + g.shape))
        assert carleman_ratio(v, params).skipped

    def test_bump_finite_for_small_and_large_s(self, g, params):
        (v,) = make_ensemble(g, window(1e-3), 1)
        for s in (2.0, 8.0):
            r = carleman_ratio(v, params.with_s(s)).ratio
            assert r is not None and np.isfinite(r) and r > 0

    def test_degree_zero_homogeneity(self, g, params):
        v = make_ensemble(g, window(1e-3), 3)[2]
        a = carleman_ratio(v, params).ratio
        b = carleman_ratio(v.with_frames(-7.5 * v.frames), params).ratio
        assert b == pytest.approx(a, rel=1e-12)

    def test_sweep_rows(self, g, params):
        ens = make_ensemble(g, window(1e-3), 4)
        rows = carleman_sweep(params, ens, [2.0, 4.0])
        assert len(rows) == 8
        assert set(rows[0]) == {"s_C", "lam_C", "beta", "ensemble_id", "lhs", "rhs", "ratio"}

    def test_growth_counts_rises_only(self):
        rows = [{"s_C": s, "ratio": r} for s, r in ((2, 1.0), (2, 0.5), (4, 0.25), (8, 0.75), (16, 0.1))]
        assert sweep_growth(rows) == pytest.approx(3.0)
        falling = [{"s_C": s, "ratio": 1.0 / s} for s in (2, 4, 8)]
        assert sweep_growth(falling) == pytest.approx(0.5)
        assert sweep_growth(falling[:1]) is None


class TestPerturbed:
    def test_linear_without_drift_reduces_to_plain_ratio(self, g, params):
        spec = default_problem(g, linear=True, b=0.0, c=0.0)
        u = solve(spec)
        z = time_derivative(u)
        pr = perturbed_ratio(z, u, spec, params)
        wp = build_weights(params, g, z.times)
        s = params.s_c
        V = np.exp(s * wp.phi.frames - s * np.max(wp.phi.frames)) * z.frames
        plain = carleman_ratio(z.with_frames(V), params, spec.faces)
        assert pr.ratio == pytest.approx(plain.ratio, rel=0.02)

    def test_default_run_finite(self, nonlinear_run, params):
        spec, u = nonlinear_run
        pr = perturbed_ratio(time_derivative(u), u, spec, params)
        assert pr.ratio is not None and np.isfinite(pr.ratio)
        assert pr.extras["absorb_drift"] >= 0 and pr.extras["absorb_potential"] >= 0

    def test_departure_grows_with_eps(self, g):
        rows = perturbed_sweep(g, [0.01, 0.05, 0.2])
        dep = [r["departure"] for r in rows]
        assert dep[0] < dep[1] < dep[2]
