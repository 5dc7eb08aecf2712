"""Arrival statistics, sequence encoding, and reference-clock noise."""

import math

import numpy as np
import pytest
from scipy import integrate

from photonclock.tagstream import Channel
from photonclock.simulator import (
    BetaArrivalModel, SourceConfig, ClockNoiseModel, SimulatorError,
    beta_pdf, fit_beta, beta_for_rate, calibrate_beta_slope,
    sample_arrivals, make_sequence, encode_sequence,
    sample_clock_noise, apply_clock_noise, inject_dark_counts,
    DEFAULT_X0_S, FWHM_TO_SIGMA, X_SYMBOL,
)


class TestBetaModel:
    def test_mean_interarrival(self):
        m = BetaArrivalModel(beta=4.0, x0=0.1, s=1.0)
        # x0 + s * alpha / (alpha + beta)
        assert m.mean_interarrival() == pytest.approx(0.1 + 1.0 / 5.0)

    def test_pdf_normalizes(self):
        m = BetaArrivalModel(beta=5e5, x0=15e-9, s=1.0)
        # nearly all mass sits within ~10 mean gaps of the floor
        total, err = integrate.quad(
            lambda x: beta_pdf(x, m), m.x0, m.x0 + m.s,
            points=[m.x0 + k / m.beta for k in (1, 3, 10, 30)], limit=200)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_pdf_at_floor(self):
        m = BetaArrivalModel(beta=123.0, x0=15e-9, s=1.0)
        assert beta_pdf(m.x0, m) == pytest.approx(m.beta / m.s)

    def test_pdf_outside_support(self):
        m = BetaArrivalModel(beta=10.0, x0=1.0, s=1.0)
        assert beta_pdf(0.5, m) == 0.0
        assert beta_pdf(2.5, m) == 0.0

    def test_sampling_matches_moments(self):
        m = BetaArrivalModel(beta=2e5, x0=15e-9, s=1.0)
        rng = np.random.default_rng(0)
        x = m.sample(200_000, rng)
        assert np.all(x > m.x0)
        assert np.all(x < m.x0 + m.s)
        se = x.std() / math.sqrt(x.size)
        assert abs(x.mean() - m.mean_interarrival()) < 3 * se

    def test_validation(self):
        with pytest.raises(SimulatorError):
            BetaArrivalModel(beta=-1.0)
        with pytest.raises(SimulatorError):
            BetaArrivalModel(beta=1.0, s=0.0)


class TestFitAndRateMap:
    def test_fit_recovers_beta(self):
        m = BetaArrivalModel(beta=5e5, x0=15e-9, s=1.0)
        rng = np.random.default_rng(1)
        fitted = fit_beta(m.sample(100_000, rng), x0=m.x0, s=m.s)
        assert fitted.beta == pytest.approx(m.beta, rel=0.02)

    def test_fit_rejects_small_or_out_of_support(self):
        with pytest.raises(SimulatorError):
            fit_beta(np.full(10, 0.5))
        bad = np.full(2000, 2.5)  # beyond x0 + s
        with pytest.raises(SimulatorError):
            fit_beta(bad)

    @pytest.mark.parametrize("rate", [100e3, 300e3, 650e3])
    def test_rate_map_mean_within_one_percent(self, rate):
        m = beta_for_rate(rate)
        assert m.mean_interarrival() == pytest.approx(1.0 / rate, rel=0.01)

    def test_rate_map_linear(self):
        assert beta_for_rate(250e3).beta == pytest.approx(250e3 * 1.0)

    def test_rate_ceiling(self):
        with pytest.raises(SimulatorError):
            beta_for_rate(1.0 / DEFAULT_X0_S)

    def test_calibrate_slope(self):
        rng = np.random.default_rng(2)
        traces = []
        for rate in (100e3, 300e3, 500e3):
            m = beta_for_rate(rate)
            traces.append((rate, m.sample(20_000, rng)))
        slope = calibrate_beta_slope(traces)
        assert slope == pytest.approx(1.0, rel=0.02)


class TestSampleArrivals:
    def test_count_and_floor(self):
        rate, dur = 500e3, 1.0
        s = sample_arrivals(rate, dur, seed=0)
        n_exp = dur / beta_for_rate(rate).mean_interarrival()
        assert abs(len(s) - n_exp) < 4 * math.sqrt(n_exp)
        # the dead-time floor survives the ps rounding
        assert np.diff(s.t).min() >= int(DEFAULT_X0_S * 1e12) - 1
        assert s.t[-1] < s.duration_ps
        assert np.all(s.channel == int(Channel.UNKNOWN))

    def test_deterministic(self):
        a = sample_arrivals(200e3, 0.1, seed=42)
        b = sample_arrivals(200e3, 0.1, seed=42)
        assert a == b

    def test_bad_duration(self):
        with pytest.raises(SimulatorError):
            sample_arrivals(1e5, 0.0)


class TestMakeSequence:
    def test_symbols_and_length(self):
        seq = make_sequence(4096, seed=0)
        assert seq.size == 4096
        assert set(np.unique(seq)) <= {0, 1, 2}

    def test_pow2_required(self):
        with pytest.raises(SimulatorError):
            make_sequence(1000)

    def test_p_z_extremes(self):
        assert np.all(make_sequence(256, seed=1, p_z=1.0) != X_SYMBOL)
        assert np.all(make_sequence(256, seed=1, p_z=0.0) == X_SYMBOL)

    def test_deterministic(self):
        assert np.array_equal(make_sequence(64, seed=9), make_sequence(64, seed=9))


class TestSourceConfig:
    def test_defaults(self):
        src = SourceConfig()
        assert src.qubit_rate_hz == 595e6
        assert src.pulses_per_qubit == 2
        assert src.pulse_line_hz == pytest.approx(1.19e9)
        assert src.qubit_period_ps == pytest.approx(1e12 / 595e6)

    def test_position_validation(self):
        with pytest.raises(SimulatorError):
            SourceConfig(pulse_positions_ps=(800.0, 0.0))
        with pytest.raises(SimulatorError):
            SourceConfig(pulse_positions_ps=(0.0, 2000.0))

    def test_sequence_pow2(self):
        with pytest.raises(SimulatorError):
            SourceConfig(sequence=np.zeros(100, dtype=np.uint8))


class TestEncodeSequence:
    def test_lossless_structure(self):
        arr = sample_arrivals(300e3, 0.05, seed=3)
        src = SourceConfig()
        enc, truth = encode_sequence(arr, src, error_prob=0.0, seed=4)
        assert len(enc) == len(arr)
        period = src.qubit_period_ps
        positions = np.asarray(src.pulse_positions_ps)
        # every output time sits on a legal grid point of its own qubit
        expect_slot0 = np.round(truth.qubit_index * period + positions[0])
        expect_slot1 = np.round(truth.qubit_index * period + positions[1])
        on_grid = (enc.t == expect_slot0.astype(np.int64)) \
            | (enc.t == expect_slot1.astype(np.int64))
        assert np.all(on_grid)
        # no flips at p = 0, and Z channels reproduce the transmitted bit
        assert not truth.flipped.any()
        z = truth.bit >= 0
        assert np.array_equal(enc.channel[z], truth.bit[z].astype(np.uint8))
        assert np.all(enc.channel[~z] == int(Channel.X))
        assert set(np.unique(truth.symbol)) <= {0, 1, 2}

    def test_flip_rate(self):
        arr = sample_arrivals(500e3, 0.1, seed=5)
        src = SourceConfig(sequence=make_sequence(4096, seed=5, p_z=1.0))
        p = 0.1
        enc, truth = encode_sequence(arr, src, error_prob=p, seed=6)
        n = len(arr)
        sd = math.sqrt(n * p * (1 - p))
        assert abs(truth.flipped.sum() - n * p) < 4 * sd
        # a flip lands the tag in the opposite slot
        expect = np.where(truth.flipped, 1 - truth.bit, truth.bit)
        assert np.array_equal(enc.channel, expect.astype(np.uint8))

    def test_x_symbols_random_slot(self):
        arr = sample_arrivals(200e3, 0.05, seed=7)
        src = SourceConfig(sequence=make_sequence(256, seed=7, p_z=0.0))
        enc, truth = encode_sequence(arr, src, error_prob=0.5, seed=8)
        assert np.all(enc.channel == int(Channel.X))
        assert np.all(truth.bit == -1)
        period = src.qubit_period_ps
        folded = enc.t.astype(np.float64) % period
        # slot 0 sits on the period boundary: distance must be circular
        near0 = np.minimum(folded, period - folded) < 1.0
        near1 = np.abs(folded - 800.0) < 1.0
        assert np.all(near0 | near1)
        frac = near1.mean()
        assert 0.4 < frac < 0.6

    def test_needs_two_slots(self):
        arr = sample_arrivals(100e3, 0.01, seed=9)
        src = SourceConfig(pulse_positions_ps=(0.0,))
        with pytest.raises(SimulatorError):
            encode_sequence(arr, src)

    def test_truth_round_trip(self):
        arr = sample_arrivals(100e3, 0.01, seed=10)
        _, truth = encode_sequence(arr, SourceConfig(), 0.25, seed=11)
        from photonclock.simulator import EncodeTruth
        back = EncodeTruth.from_dict(truth.to_dict())
        assert np.array_equal(back.qubit_index, truth.qubit_index)
        assert np.array_equal(back.bit, truth.bit)
        assert np.array_equal(back.flipped, truth.flipped)
        assert np.array_equal(back.sequence, truth.sequence)


class TestClockNoise:
    def test_zero_noise_is_identity(self):
        arr = sample_arrivals(100e3, 0.02, seed=12)
        out = apply_clock_noise(arr, ClockNoiseModel(0.0, 0.0), nominal_hz=1e9)
        assert out == arr

    def test_white_noise_scale(self):
        arr = sample_arrivals(500e3, 1.0, seed=13)
        noise = ClockNoiseModel(rw_fwhm_hz=0.0, white_sigma_ps=40.0, seed=14)
        out = apply_clock_noise(arr, noise, nominal_hz=1e9)
        disp = (out.t - arr.t).astype(np.float64)
        assert abs(disp.mean()) < 3 * 40.0 / math.sqrt(disp.size)
        assert disp.std() == pytest.approx(40.0, rel=0.02)

    def test_displacement_integrates_frequency_path(self):
        # left-endpoint integral: finite differences of the displacement
        # recover the walked frequency offset exactly (a fast clock emits
        # early, hence the sign)
        t_ps = np.arange(1, 2001, dtype=np.int64) * 1_000_000
        noise = ClockNoiseModel(rw_fwhm_hz=10.0, white_sigma_ps=0.0, seed=15)
        nominal = 1.19e9
        disp, nu = sample_clock_noise(t_ps, noise, nominal)
        gaps_s = np.diff(t_ps) * 1e-12
        recovered = -np.diff(disp) * 1e-12 / gaps_s * nominal
        assert recovered == pytest.approx(nu[:-1], abs=1e-6)

    def test_random_walk_increment_variance(self):
        dt = 1e-5
        n = 1_000_000
        t_ps = (np.arange(1, n + 1) * dt * 1e12).astype(np.int64)
        fwhm = 2.0
        sigma_f = fwhm / FWHM_TO_SIGMA
        noise = ClockNoiseModel(rw_fwhm_hz=fwhm, white_sigma_ps=0.0, seed=16)
        _, nu = sample_clock_noise(t_ps, noise, 1e9)
        for lag in (10, 100):
            inc = nu[lag::lag] - nu[:-lag:lag]
            expected = sigma_f ** 2 * lag * dt
            rel_se = math.sqrt(2.0 / inc.size)
            assert inc.var() == pytest.approx(expected, rel=4 * rel_se)

    def test_rw_needs_nominal(self):
        arr = sample_arrivals(100e3, 0.01, seed=17)
        with pytest.raises(SimulatorError):
            apply_clock_noise(arr, ClockNoiseModel(rw_fwhm_hz=5.0, seed=1))

    def test_nominal_from_meta(self):
        arr = sample_arrivals(300e3, 0.02, seed=18)
        enc, _ = encode_sequence(arr, SourceConfig(), seed=19)
        out = apply_clock_noise(enc, ClockNoiseModel(rw_fwhm_hz=5.0,
                                                     white_sigma_ps=0.0, seed=20))
        assert len(out) == len(enc)
        assert not np.array_equal(out.t, enc.t)

    def test_deterministic(self):
        arr = sample_arrivals(200e3, 0.05, seed=21)
        noise = ClockNoiseModel(3.0, 40.0, seed=22)
        a = apply_clock_noise(arr, noise, nominal_hz=1e9)
        b = apply_clock_noise(arr, noise, nominal_hz=1e9)
        assert a == b

    def test_negative_magnitudes_rejected(self):
        with pytest.raises(SimulatorError):
            ClockNoiseModel(rw_fwhm_hz=-1.0)
        with pytest.raises(SimulatorError):
            ClockNoiseModel(white_sigma_ps=-1.0)


class TestDarkCounts:
    def test_zero_rate_no_op(self):
        arr = sample_arrivals(100e3, 0.01, seed=23)
        assert inject_dark_counts(arr, 0.0) is arr

    def test_count_and_order(self):
        arr = sample_arrivals(100e3, 1.0, seed=24)
        rate = 5e3
        out = inject_dark_counts(arr, rate, seed=25)
        added = len(out) - len(arr)
        assert abs(added - rate) < 4 * math.sqrt(rate)
        assert np.all(np.diff(out.t) >= 0)
        assert out.duration_ps == arr.duration_ps
