import numpy as np
import pytest

from overlapic.analysis import (_is_unimodal, cee_decomposition, discrete_peak_search,
                                equivalent_snr, optimize_pilot_density, overhead_factor,
                                predict_floors, predicted_cmse, prediction_csv, prediction_table,
                                qpsk_symbol_error, ser_curve, throughput)
from overlapic.detector import imap_combiner
from overlapic.errors import InsufficientSamples
from overlapic.harness import ExperimentConfig, run_sweep

from conftest import cn


class TestFloors:
    def test_default_config(self):
        f = predict_floors(0.99, 3, 51)
        assert f.alpha_p == pytest.approx(0.960596, abs=1e-6)
        assert f.sigma2_i_floor == pytest.approx(1.398e-3, rel=1e-3)
        assert f.sinr_limit == pytest.approx(715.4, rel=1e-3)
        assert f.sinr_limit_db == pytest.approx(28.5, abs=0.05)

    def test_reciprocity(self):
        for a, nd, n_p in [(0.9, 1, 11), (0.99, 3, 51), (0.999, 15, 21)]:
            f = predict_floors(a, nd, n_p)
            assert f.sinr_limit * f.sigma2_i_floor == pytest.approx(1.0, abs=1e-12)

    def test_halves_with_double_pilots(self):
        assert predict_floors(0.99, 3, 102).sigma2_i_floor == pytest.approx(
            predict_floors(0.99, 3, 51).sigma2_i_floor / 2, rel=1e-14)

    def test_vanishes_for_slow_fading(self):
        assert predict_floors(1 - 1e-12, 3, 51).sigma2_i_floor < 1e-10

    def test_increasing_in_n_d_while_correlated(self):
        a = 0.99
        nds = [n for n in range(0, 200) if a ** (2 * (n + 1)) >= 0.5]
        v = [predict_floors(a, n, 51).sigma2_i_floor for n in nds]
        assert all(x < y for x, y in zip(v, v[1:]))


class TestCee:
    def test_high_snr_limits(self):
        ap = 0.99 ** 4
        for n in (0, 25, 50):
            d = cee_decomposition(np.ones(51), ap, 1e6, n)
            assert 0.99 <= d.power_g <= 1.01
            assert d.power_c < 1e-3

    def test_limits_improve_with_snr(self):
        ap = 0.99 ** 4
        ds = [cee_decomposition(np.ones(51), ap, r, 25) for r in (1e2, 1e4, 1e6)]
        assert abs(ds[0].power_g - 1) > abs(ds[1].power_g - 1) > abs(ds[2].power_g - 1)
        assert ds[0].power_c > ds[1].power_c > ds[2].power_c

    def test_matches_simulated_cmse(self):
        cfg = ExperimentConfig(scenario=("interference-free",), alpha=(0.99,), snr_db=(20.0,),
                               n_p=51, n_d=(3,), detectors=("I-MAP",), trials=2000, master_seed=4)
        sim = run_sweep(cfg).rows[0]["cmse"]
        pred = predicted_cmse(np.ones(51), 0.99 ** 4, 100.0)
        assert abs(pred / sim - 1) < 0.10


def _empirical_sinr(hh, ht, i, n_d, alpha, sigma2, sigma_i2, draws=1_000_000, seed=0):
    """Post-combiner SINR of the I-MAP correlator from synthetic draws.

    ``h_i`` is drawn from its Gaussian law given the framing channels, using
    generic conditioning on the full covariance of the chain.
    """
    r = np.random.default_rng(seed)
    K = n_d + 2
    C = alpha ** np.abs(np.subtract.outer(np.arange(K), np.arange(K))).astype(float)
    o = [0, K - 1]
    S = C[np.ix_([i], o)] @ np.linalg.inv(C[np.ix_(o, o)])
    v = C[i, i] - (S @ C[np.ix_(o, [i])])[0, 0]
    mu = S[0, 0] * hh + S[0, 1] * ht
    R = hh.size
    y = mu + cn(r, (draws, R), v) + cn(r, (draws, R), sigma2) + cn(r, (draws, R), sigma_i2)
    z = y @ np.conj(imap_combiner(hh, ht, i, n_d, alpha))
    return abs(z.mean()) ** 2 / z.var()


def _framing(seed):
    r = np.random.default_rng(seed)
    hh = cn(r, 2)
    return hh, 0.96 * hh + cn(r, 2, 1 - 0.96 ** 2)


class TestEquivalentSnr:
    @staticmethod
    def _check_symmetry(form, rng):
        hh, ht = cn(rng, 2), cn(rng, 2)
        for i in range(1, 4):
            a = equivalent_snr(hh, ht, i, 3, 0.98, 0.01, 0.001, form=form)
            b = equivalent_snr(ht, hh, 4 - i, 3, 0.98, 0.01, 0.001, form=form)
            assert a == pytest.approx(b, rel=1e-12)

    def test_symmetry_exact(self, rng):
        self._check_symmetry("exact", rng)

    @pytest.mark.xfail(strict=True, reason="the published closed form weights the head channel "
                                           "differently from the tail, so it is not symmetric")
    def test_symmetry_printed(self, rng):
        self._check_symmetry("printed", rng)

    @pytest.mark.parametrize("form", ["printed", "exact"])
    def test_slow_fading_limit_grows(self, form, rng):
        h = cn(rng, 2)
        vals = [equivalent_snr(h, h, 2, 3, 1 - 1e-9, s2, 0.0, form=form) for s2 in (1e-1, 1e-2, 1e-3)]
        assert vals[0] < vals[1] < vals[2]
        assert vals[2] / vals[1] == pytest.approx(10.0, rel=0.01)

    def test_slow_fading_limit_value(self, rng):
        h = cn(rng, 2)
        v = equivalent_snr(h, h, 2, 3, 1 - 1e-9, 1e-3, 0.0, form="exact")
        assert v == pytest.approx(np.sum(np.abs(h) ** 2) / 1e-3, rel=0.01)

    @pytest.mark.parametrize("seed", range(3))
    def test_exact_form_matches_empirical_sinr(self, seed):
        hh, ht = _framing(seed)
        for i in (1, 2):
            emp = _empirical_sinr(hh, ht, i, 3, 0.99, 0.01, 0.0014, seed=seed)
            assert equivalent_snr(hh, ht, i, 3, 0.99, 0.01, 0.0014, form="exact") == pytest.approx(emp, rel=0.02)

    @pytest.mark.xfail(strict=True, reason="the published closed form does not track the simulated "
                                           "combiner SINR (off by 13-67% on these draws)")
    @pytest.mark.parametrize("seed", range(3))
    def test_printed_form_matches_empirical_sinr(self, seed):
        hh, ht = _framing(seed)
        for i in (1, 2):
            emp = _empirical_sinr(hh, ht, i, 3, 0.99, 0.01, 0.0014, seed=seed)
            assert equivalent_snr(hh, ht, i, 3, 0.99, 0.01, 0.0014, form="printed") == pytest.approx(emp, rel=0.02)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            equivalent_snr(np.ones(2), np.ones(2), 0, 3, 0.9, 0.1)
        with pytest.raises(ValueError):
            equivalent_snr(np.ones(2), np.ones(2), 1, 3, 0.9, 0.1, -1.0)


class TestQpsk:
    def test_zero(self):
        assert qpsk_symbol_error(0.0) == 0.75

    def test_large(self):
        assert qpsk_symbol_error(1e4) < 1e-300 or qpsk_symbol_error(1e4) == 0.0

    def test_decreasing(self):
        v = qpsk_symbol_error(np.linspace(0, 30, 50))
        assert np.all(np.diff(v) < 0)

    def test_monte_carlo_at_ten(self):
        r = np.random.default_rng(0)
        n = 2_000_000
        s = np.exp(0.5j * np.pi * r.integers(0, 4, n))
        y = s + cn(r, n, 1 / 10)
        dec = np.exp(0.5j * np.pi * (np.ceil((np.angle(y * np.conj(s)) - np.pi / 4) / (np.pi / 2)) % 4))
        err = np.mean(dec != 1)
        se = np.sqrt(err * (1 - err) / n)
        assert abs(err - qpsk_symbol_error(10.0)) < 3 * se

    def test_negative(self):
        with pytest.raises(ValueError):
            qpsk_symbol_error(-1.0)


class TestSerCurve:
    def test_interference_free_slow_fading_has_no_floor(self):
        # two-branch diversity: a decade per 5 dB once the floor is gone
        m = ser_curve(1.0, 3, 21, [10, 20, 25], sigma_i2="none", draws=1_000_000, rel_ci=0.2)
        assert m.p_e[1] / m.p_e[0] < 0.05 and m.p_e[2] / m.p_e[1] < 0.2
        fast = ser_curve(0.99, 3, 21, [20, 25], sigma_i2="none", draws=1_000_000, rel_ci=0.2)
        assert fast.p_e[1] / fast.p_e[0] > 0.3

    def test_interference_free_decreases(self):
        m = ser_curve(0.99, 3, 21, [10, 20, 30, 40], sigma_i2="none", draws=400_000)
        assert np.all(np.diff(m.p_e) < 0)

    def test_floor_with_residual_interference(self):
        m = ser_curve(0.99, 3, 21, [30, 40, 50, 60], sigma_i2="floor", draws=400_000)
        assert m.p_e[-1] > 1e-4
        assert m.p_e[-1] / m.p_e[-2] > 0.95
        free = ser_curve(0.99, 3, 21, [30, 40, 50, 60], sigma_i2="none", draws=400_000)
        assert np.all(m.p_e > free.p_e)

    def test_model_structure(self):
        m = ser_curve(0.99, 3, 21, [20.0], sigma_i2=0.001, draws=100_000)
        assert m.p_e_i.shape == (1, 3)
        assert np.all((m.p_e_i >= 0) & (m.p_e_i <= 1))
        assert m.p_e[0] == pytest.approx(m.p_e_i.mean())

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamples):
            ser_curve(0.999, 3, 21, [30.0], sigma_i2="none", draws=2_000)

    def test_true_mode_is_optimistic(self):
        est = ser_curve(0.99, 3, 21, [20.0], sigma_i2="floor", draws=400_000, mode="estimated")
        tru = ser_curve(0.99, 3, 21, [20.0], sigma_i2="floor", draws=400_000, mode="true")
        assert tru.p_e[0] < est.p_e[0]

    def test_rejects_empty_grid(self):
        with pytest.raises(ValueError):
            ser_curve(0.99, 3, 21, [], sigma_i2="none")


class TestThroughput:
    def test_overhead_formula(self):
        assert throughput(0.0, 3, 51) == pytest.approx(150 / 201)
        assert overhead_factor(3, 51) == 150 / 201

    def test_large_block_limit(self):
        assert throughput(0.0, 10 ** 6, 51) == pytest.approx(1.0, abs=1e-5)

    def test_bounds(self):
        with pytest.raises(ValueError):
            throughput(1.5, 3, 51)

    @pytest.mark.parametrize("peak", [0, 3, 9, 14])
    def test_peak_search_on_unimodal(self, peak):
        f = lambda k: -abs(k - peak)
        assert discrete_peak_search(f, 15) == peak

    def test_unimodal_detector(self):
        assert _is_unimodal([1, 2, 3, 2, 1]) and _is_unimodal([1, 2, 3])
        assert not _is_unimodal([1, 3, 2, 3, 1])

    def test_exhaustive_fallback(self):
        pe = {1: 0.0, 3: 0.5, 7: 0.9, 9: 0.0, 15: 0.99}
        tm = optimize_pilot_density(0.99, 20, 51, list(pe), p_e_fn=pe.__getitem__)
        assert not tm.unimodal
        assert tm.n_d_opt == tm.n_d_exhaustive == 9

    def test_model_optimum_structure(self):
        nds = [1, 3, 7, 9, 15]
        a = optimize_pilot_density(0.99, 20, 51, nds, sigma_i2="floor", draws=400_000)
        b = optimize_pilot_density(0.999, 20, 51, nds, sigma_i2="floor", draws=400_000)
        assert a.n_d_opt == a.n_d_exhaustive and b.n_d_opt == b.n_d_exhaustive
        assert b.density_opt <= a.density_opt
        assert b.tp_max >= a.tp_max

    def test_unimodal_in_most_configurations(self):
        flags = []
        for a in (0.9, 0.95, 0.99, 0.999):
            for snr in (5.0, 10.0, 20.0):
                tm = optimize_pilot_density(a, snr, 21, range(1, 16), sigma_i2="floor",
                                            draws=100_000, rel_ci=1.0)
                flags.append(tm.unimodal)
        assert np.mean(flags) >= 0.95


def test_prediction_table_csv():
    rows = prediction_table([0.99], [1, 3], 21, [20.0], sigma_i2="floor", draws=100_000)
    assert len(rows) == 2 and {r["n_d_opt"] for r in rows} <= {1, 3}
    text = prediction_csv(rows)
    assert text.splitlines()[0] == ("alpha,n_d,n_p,snr_db,sigma2_i_floor,sinr_limit_db,"
                                    "p_e_model,tp_model,n_d_opt")
