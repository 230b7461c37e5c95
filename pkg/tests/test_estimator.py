import numpy as np
import pytest

from overlapic.channel import FrameLayout
from overlapic.errors import IllConditioned, StationarityViolation
from overlapic.estimator import (average_eic, build_workspace, cancel_and_estimate_channels,
                                 conditional_params, estimate_eic_per_pilot, estimate_frame,
                                 estimate_reference, pilot_log_likelihood, pilot_view,
                                 residual_power, verify_stationarity_of_estimator)
from overlapic.harness import ConfigPoint, ExperimentConfig, generate_trial

from conftest import cn
from oracles import pilot_toy, profiled_grid_argmax


def pilot_block(rng, N, R, L, alpha_p, sigma2, c=None, batch=(), ps=1.0):
    shape = batch + (N,)
    if alpha_p >= 1.0:
        h = np.repeat(cn(rng, batch + (1, R)), N, axis=-2)
    else:
        C = alpha_p ** np.abs(np.subtract.outer(np.arange(N), np.arange(N))).astype(float)
        h = np.einsum("nm,...mr->...nr", np.linalg.cholesky(C), cn(rng, shape + (R,)))
    x = np.exp(0.5j * np.pi * rng.integers(0, 4, shape))
    hi = np.exp(2j * np.pi * rng.random(batch + (R,)))
    b = np.exp(0.5j * np.pi * rng.integers(0, 4, shape + (L,)))
    B = ps * hi[..., None, :, None] * b[..., :, None, :]
    if c is None:
        c = cn(rng, L)
    w = cn(rng, shape + (R,), sigma2)
    y = h * x[..., None] + np.einsum("...nrl,l->...nr", B, c) + w
    return y, x, B, c, h


class TestConditionalParams:
    def test_self(self):
        cp = conditional_params(3, 3, 0.9, 100.0, np.ones(5))
        assert (cp.omega, cp.beta, cp.sigma2, cp.sign) == (1.0, 0j, 0.01, 0)

    @pytest.mark.parametrize("i", [2, 4])
    def test_adjacent(self, i):
        cp = conditional_params(3, i, 0.9, 100.0, np.ones(5))
        assert cp.omega == pytest.approx(0.9) and cp.beta == 0
        assert cp.sign == (1 if i < 3 else -1)

    def test_high_snr_trend(self):
        ap = 0.95
        cp = conditional_params(5, 2, ap, 1e9, np.array([1, 1j, 1, 1, 1]))
        assert cp.omega < 1e-6
        assert abs(cp.beta) == pytest.approx(ap, rel=1e-6)
        assert cp.sigma2 == pytest.approx(1 - ap ** 2, rel=1e-6)

    def test_positive_variance(self):
        for i in range(1, 8):
            assert conditional_params(4, i, 0.97, 1e4, np.ones(7)).sigma2 > 0


class TestAgainstReference:
    @pytest.mark.parametrize("N,R,L", [(3, 1, 1), (7, 2, 4), (11, 3, 2)])
    def test_vectorised_equals_loops(self, rng, N, R, L):
        y, x, B, c, _ = pilot_block(rng, N, R, L, 0.93, 0.02)
        out = estimate_frame(y, x, B, 0.93, 0.02)
        c_ref, per_ref, h_ref = estimate_reference(y, x, B, 0.93, 0.02)
        assert np.allclose(out.eic.per_pilot, per_ref, atol=1e-10)
        assert np.allclose(out.c_tilde, c_ref, atol=1e-10)
        assert np.allclose(out.h_tilde, h_ref, atol=1e-10)

    def test_batched_equals_single(self, rng):
        y, x, B, c, _ = pilot_block(rng, 9, 2, 4, 0.9, 0.05, batch=(5,))
        out = estimate_frame(y, x, B, 0.9, 0.05)
        for t in range(5):
            one = estimate_frame(y[t], x[t], B[t], 0.9, 0.05)
            assert np.allclose(one.c_tilde, out.c_tilde[t], atol=1e-12)


class TestGridOracle:
    def test_two_pilot_toy(self, rng):
        y, x, B, c, h = pilot_toy(rng, n_p=2, alpha_p=0.9, sigma2=0.05)
        c_n, ws = estimate_eic_per_pilot(y, x, B, 0.9, 0.05)
        for n in range(2):
            cg, _, edge = profiled_grid_argmax(y, x, B, 0.9, 0.05, n, c[0], 6.0, 0.01)
            assert not edge
            cg, hg, edge = profiled_grid_argmax(y, x, B, 0.9, 0.05, n, cg, 0.02, 1e-4)
            assert not edge
            assert abs(c_n[n, 0].real - cg.real) <= 1e-4 and abs(c_n[n, 0].imag - cg.imag) <= 1e-4

    def test_three_pilot_toy_with_channel(self, rng):
        y, x, B, c, h = pilot_toy(rng, n_p=3, alpha_p=0.9, sigma2=0.05)
        c_n, ws = estimate_eic_per_pilot(y, x, B, 0.9, 0.05)
        for n in range(3):
            cg, _, _ = profiled_grid_argmax(y, x, B, 0.9, 0.05, n, c[0], 6.0, 0.01)
            cg, hg, edge = profiled_grid_argmax(y, x, B, 0.9, 0.05, n, cg, 0.02, 1e-4)
            assert not edge
            h_n = cancel_and_estimate_channels(ws, c_n[n]).h_tilde[n, 0]
            assert abs(c_n[n, 0] - cg) <= 1.5e-4
            assert abs(h_n - hg) <= 1e-3

    def test_likelihood_is_the_grid_objective(self, rng):
        # the package likelihood and the oracle's generic conditioning agree up to a constant
        y, x, B, c, h = pilot_toy(rng, n_p=4, alpha_p=0.85, sigma2=0.1)
        from oracles import _conditioning_terms
        terms = _conditioning_terms(x, 1, 0.85, 0.1)
        vals = []
        for hv, cv in [(0.1 + 0.2j, 0.3j), (-0.4, 1.0 + 0.1j), (0.7j, -0.2)]:
            ll = -abs(hv) ** 2
            for i, j, ky, kh, s in terms:
                e = y[i, 0] - B[i, 0, 0] * cv
                if i != 1:
                    e -= ky * (y[j, 0] - B[j, 0, 0] * cv)
                ll -= abs(e - kh * hv) ** 2 / s
            vals.append(pilot_log_likelihood(np.array([hv]), np.array([cv]), y, x, B, 0.85, 0.1, 1) - ll)
        assert np.ptp(vals) < 1e-9


class TestShiftInvariance:
    @pytest.mark.parametrize("factor", [2.0, 5.0])
    def test_error_independent_of_c(self, factor):
        y, x, B, c, h = pilot_block(np.random.default_rng(8), 11, 2, 4, 0.95, 0.01)
        w_part = y - np.einsum("nrl,l->nr", B, c)
        y2 = w_part + np.einsum("nrl,l->nr", B, factor * c)
        e1 = estimate_frame(y, x, B, 0.95, 0.01).c_tilde - c
        e2 = estimate_frame(y2, x, B, 0.95, 0.01).c_tilde - factor * c
        assert np.allclose(e1, e2, rtol=0, atol=1e-12 * factor)


class TestPilotGeometry:
    def test_noiseless_static_is_exact(self, rng):
        y, x, B, c, h = pilot_block(rng, 11, 2, 4, 1.0, 1e-14)
        out = estimate_frame(y, x, B, 1.0, 1e-14)
        assert np.max(np.abs(out.c_tilde - c)) < 1e-5
        assert np.max(np.abs(out.h_tilde - h)) < 1e-5

    def test_error_falls_with_more_pilots(self):
        err = []
        for N in (11, 51, 201):
            r = np.random.default_rng(N)
            y, x, B, c, h = pilot_block(r, N, 2, 4, 1.0, 1e-2, batch=(200,))
            err.append(np.mean(np.abs(estimate_frame(y, x, B, 1.0, 1e-2).c_tilde - c) ** 2))
        assert err[0] > err[1] > err[2]


class TestAveraging:
    def test_mean(self):
        e = average_eic(np.array([[1 + 0j], [1j]]))
        assert e.c_tilde[0] == 0.5 + 0.5j

    def test_constant(self):
        e = average_eic(np.tile([0.3 - 1j, 2.0], (7, 1)))
        assert np.allclose(e.c_tilde, [0.3 - 1j, 2.0])

    def test_variance_reduction(self, rng):
        y, x, B, c, h = pilot_block(rng, 11, 2, 4, 0.9, 0.05, batch=(1000,))
        out = estimate_frame(y, x, B, 0.9, 0.05)
        var_avg = np.var(out.c_tilde[:, 0])
        var_n = np.var(out.eic.per_pilot[:, :, 0], axis=0)
        assert var_avg < var_n.mean()

    def test_average_no_worse_than_best_pilot(self):
        # per-pilot estimates are strongly correlated, so the margin is small: use paired errors
        y, x, B, c, h = pilot_block(np.random.default_rng(3), 11, 2, 4, 0.9, 0.05, batch=(20_000,))
        out = estimate_frame(y, x, B, 0.9, 0.05, check=False)
        ok = out.workspace.positive_definite & (out.workspace.cond < 1e12)
        assert ok.mean() > 0.99
        mse_avg = np.mean(np.abs(out.c_tilde[ok] - c) ** 2, axis=0)
        mse_n = np.mean(np.abs(out.eic.per_pilot[ok] - c) ** 2, axis=0)
        assert np.all(mse_avg <= mse_n.min(axis=0))


class TestWorkspace:
    def test_positive_definite_random(self):
        r = np.random.default_rng(21)
        seen = set()
        for k in range(100):
            N = int(r.choice([3, 11]))
            L = int(r.choice([2, 4]))
            ap, s2 = float(r.uniform(0.5, 0.999)), float(10 ** r.uniform(-4, 0))
            y, x, B, c, _ = pilot_block(r, N, 2, L, ap, s2)
            ws = build_workspace(y, x, B, ap, s2)
            assert np.all(ws.a >= 1.0)
            if N >= L:
                assert np.all(ws.d_eigs[..., 0] > 0)
                seen.add((N, L))
        assert {(3, 2), (11, 2), (11, 4)} <= seen

    def test_too_few_pilots_for_span_is_rejected(self, rng):
        # each B_i is rank one, so three pilots cannot pin down four coefficients
        y, x, B, c, _ = pilot_block(rng, 3, 2, 4, 0.9, 0.05)
        with pytest.raises(IllConditioned):
            estimate_frame(y, x, B, 0.9, 0.05)

    def test_constant_interference_is_ill_conditioned(self, rng):
        y, x, B, c, _ = pilot_block(rng, 11, 2, 4, 0.9, 0.05)
        B[:] = B[0]
        with pytest.raises(IllConditioned):
            estimate_frame(y, x, B, 0.9, 0.05)

    def test_scalar_a_matches_formula(self, rng):
        N, ap, s2 = 7, 0.9, 0.05
        y, x, B, c, _ = pilot_block(rng, N, 2, 4, ap, s2)
        ws = build_workspace(y, x, B, ap, s2)
        for n in range(N):
            a = 1 + sum(conditional_params(n + 1, i + 1, ap, 1 / s2, x).omega ** 2
                        / conditional_params(n + 1, i + 1, ap, 1 / s2, x).sigma2 for i in range(N))
            assert ws.a[n] == pytest.approx(a, rel=1e-12)


class TestStationarityAudit:
    @pytest.mark.parametrize("seed", range(5))
    def test_toy_gradient(self, seed):
        y, x, B, c, h = pilot_toy(np.random.default_rng(seed), n_p=3)
        c_n, ws = estimate_eic_per_pilot(y, x, B, 0.9, 0.05)
        for n in range(3):
            h_n = cancel_and_estimate_channels(ws, c_n[n]).h_tilde[n]
            rep = verify_stationarity_of_estimator(y, x, B, 0.9, 0.05, n, h_n, c_n[n])
            assert rep.relative_gradient < 1e-6 and np.all(rep.perturbation_drops > 0)

    def test_axis_perturbation_lowers_likelihood(self, rng):
        y, x, B, c, h = pilot_toy(rng, n_p=3)
        c_n, ws = estimate_eic_per_pilot(y, x, B, 0.9, 0.05)
        h_n = cancel_and_estimate_channels(ws, c_n[1]).h_tilde[1]
        base = pilot_log_likelihood(h_n, c_n[1], y, x, B, 0.9, 0.05, 1)
        for d in (1e-3, 1e-3j, -1e-3, -1e-3j):
            assert pilot_log_likelihood(h_n + d, c_n[1], y, x, B, 0.9, 0.05, 1) < base

    def test_static_noiseless_max_at_truth(self, rng):
        N = 5
        h = np.tile(cn(rng, 1), (N, 1))
        x = np.exp(0.5j * np.pi * rng.integers(0, 4, N))
        y = h * x[:, None]
        out = estimate_frame(y, x, None, 1.0, 1e-12)
        assert np.allclose(out.h_tilde, h, atol=1e-9)

    def test_violation_detected(self, rng):
        y, x, B, c, h = pilot_toy(rng, n_p=3)
        c_n, ws = estimate_eic_per_pilot(y, x, B, 0.9, 0.05)
        h_n = cancel_and_estimate_channels(ws, c_n[0]).h_tilde[0]
        with pytest.raises(StationarityViolation):
            verify_stationarity_of_estimator(y, x, B, 0.9, 0.05, 0, h_n + 0.1, c_n[0])


class TestStatistics:
    def test_unbiased(self):
        r = np.random.default_rng(5)
        c = cn(r, 4)
        y, x, B, _, _ = pilot_block(r, 21, 2, 4, 0.99 ** 4, 0.01, c=c, batch=(10_000,))
        e = estimate_frame(y, x, B, 0.99 ** 4, 0.01).c_tilde - c
        se = e.std(axis=0, ddof=1) / np.sqrt(e.shape[0])
        m = e.mean(axis=0)
        assert np.all(np.abs(m.real) < 4 * se) and np.all(np.abs(m.imag) < 4 * se)

    def test_interference_power_saturation(self):
        ap, s2 = 0.99 ** 4, 1e-3
        res = []
        for ps in (1.0, 10.0, 100.0):
            r = np.random.default_rng(77)
            y, x, B, c, _ = pilot_block(r, 21, 2, 4, ap, s2, batch=(2000,), ps=ps)
            est = estimate_frame(y, x, B, ap, s2)
            res.append(residual_power(B, c, est.c_tilde).mean())
        assert abs(res[1] / res[0] - 1) < 0.10 and abs(res[2] / res[0] - 1) < 0.10

    def test_interference_free_cmse_falls_with_snr(self):
        cfg = ExperimentConfig(scenario=("interference-free",), n_p=21, trials=1)
        lay = FrameLayout(21, 3)
        cm = []
        for snr in (10.0, 20.0, 30.0, 40.0):
            e = []
            for t in range(300):
                y, x, B, c, h = generate_trial(cfg, ConfigPoint("interference-free", 0.99, 3, snr), t)
                pos = lay.pilot_positions
                out = estimate_frame(y[pos], x[pos], None, lay.alpha_p(0.99), 10 ** (-snr / 10))
                e.append(np.mean(np.abs(out.h_tilde - h[pos]) ** 2))
            cm.append(np.mean(e))
        assert all(a > b for a, b in zip(cm, cm[1:]))

    def test_pilot_view(self):
        cfg = ExperimentConfig(n_p=5, trials=1)

        class Obs:
            pass
        o = Obs()
        o.layout = FrameLayout(5, 2)
        y, x, B, c, h = generate_trial(cfg, ConfigPoint("interference-present", 0.99, 2, 20.0), 0)
        o.y, o.x_true, o.B = y, x, B
        yp, xp, Bp = pilot_view(o)
        assert yp.shape[0] == xp.shape[0] == Bp.shape[0] == 5
        assert np.all(xp == 1)
