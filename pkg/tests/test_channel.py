import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ntnsync.channel import (ChannelType, Fading, ImpairmentConfig, Tap, TdlCProfile, apply_impairments,
                             draw_block_gains, fractional_delay, measure_snr)
from ntnsync.waveform import IqBuffer, PreambleConfig, build_schedule, gen_preamble

FS = 1.92e6


def analytic_rx(cfg, d, cfo, rate, n_out):
    """Noiseless AWGN model, evaluated on the continuous-time tone of each group."""
    sched = build_schedule(cfg)
    t = np.arange(n_out) - d
    m = np.floor(t / cfg.sg_len).astype(int)
    inside = (m >= 0) & (m < cfg.n_sg)
    k = np.array([sched[i] for i in np.clip(m, 0, cfg.n_sg - 1)])
    q = t - m * cfg.sg_len - cfg.cp_len
    x = np.where(inside, np.exp(2j * np.pi * k * q / cfg.fft_len), 0)
    f, a = cfo / FS, rate / FS ** 2
    return x * np.exp(2j * np.pi * (f * t + 0.5 * a * t * t))


class TestImpairments:
    def test_identity(self):
        x = gen_preamble(PreambleConfig(n_rep=1))
        y = apply_impairments(x, ImpairmentConfig())
        assert np.array_equal(y.samples[:len(x)], x.samples)
        assert np.all(y.samples[len(x):] == 0)

    def test_cfo_phase_increment(self):
        x = IqBuffer(np.ones(4096))
        y = apply_impairments(x, ImpairmentConfig(cfo_hz=1500.0)).samples[:4096]
        inc = np.angle(y[1:] * np.conj(y[:-1]))
        assert np.allclose(inc, 2 * np.pi * 1500 / FS, atol=1e-12)
        assert inc[0] == pytest.approx(4.9087e-3, abs=1e-7)

    @pytest.mark.parametrize("d", [0.0, 200.0, 200.37, 1000.5, 1343.99])
    def test_matches_signal_model(self, d):
        cfg = PreambleConfig(n_rep=2)
        x = gen_preamble(cfg)
        y = apply_impairments(x, ImpairmentConfig(toa_samples=d, cfo_hz=-420.0, doppler_rate_hz_per_s=-300.0))
        ref = analytic_rx(cfg, d, -420.0, -300.0, len(y))
        assert np.max(np.abs(y.samples - ref)) < 1e-9

    def test_rejects_delay_beyond_window(self):
        with pytest.raises(ValueError):
            ImpairmentConfig(toa_samples=2000.0)
        with pytest.raises(ValueError):
            ImpairmentConfig(toa_samples=-1.0)

    def test_output_fits_max_delay(self):
        x = gen_preamble(PreambleConfig(n_rep=1))
        y = apply_impairments(x, ImpairmentConfig(toa_samples=1344.0, channel="TdlC"))
        assert len(y) == len(x) + 1344 + TdlCProfile.default().max_delay
        assert abs(y.samples[-1]) > 0

    def test_same_seed_same_output(self):
        x = gen_preamble(PreambleConfig(n_rep=1))
        imp = ImpairmentConfig(toa_samples=10.5, snr_db=0.0, channel="TdlC", seed=42)
        a = apply_impairments(x, imp, block_len=3072)
        b = apply_impairments(x, imp, block_len=3072)
        assert np.array_equal(a.samples, b.samples)
        c = apply_impairments(x, ImpairmentConfig(toa_samples=10.5, snr_db=0.0, channel="TdlC", seed=43),
                              block_len=3072)
        assert not np.array_equal(a.samples, c.samples)

    def test_doppler_rate_term_is_small_per_sample(self):
        # the quadratic term changes the per-sample phase increment by
        # 2*pi*alpha*n/fs^2, far below the wrap resolution of the series
        cfg = PreambleConfig(n_rep=8)
        alpha = -620.0 / FS ** 2
        perturb = 2 * np.pi * abs(alpha) * cfg.length
        assert perturb < 1e-2
        assert perturb / (2 * np.pi * 1000 / FS) < 0.05


class TestFractionalDelay:
    @given(st.floats(0.0, 50.0), st.integers(0, 11))
    def test_single_tone_exact(self, d, k):
        n = np.arange(600)
        x = np.exp(2j * np.pi * k * n / 512)
        y = fractional_delay(x, d, 700)
        lo = int(math.floor(d)) + 1
        t = np.arange(lo, lo + 500)
        assert np.max(np.abs(y[t] - np.exp(2j * np.pi * k * (t - d) / 512))) < 1e-9

    def test_integer_shift(self):
        x = np.arange(1, 6, dtype=complex)
        assert np.array_equal(fractional_delay(x, 2.0, 8), np.array([0, 0, 1, 2, 3, 4, 5, 0], dtype=complex))


class TestNoise:
    def test_measure_snr_identical_is_inf(self):
        x = gen_preamble(PreambleConfig(n_rep=1))
        assert measure_snr(x, x) == math.inf

    def test_measure_snr_length_mismatch(self):
        with pytest.raises(ValueError):
            measure_snr(IqBuffer(np.ones(4)), IqBuffer(np.ones(5)))

    @pytest.mark.parametrize("snr", [0.0, 3.0, -3.0])
    def test_calibration(self, snr):
        x = IqBuffer(np.exp(2j * np.pi * 0.01 * np.arange(1_000_000)))
        clean = apply_impairments(x, ImpairmentConfig(max_toa_samples=0))
        noisy = apply_impairments(x, ImpairmentConfig(snr_db=snr, seed=1, max_toa_samples=0))
        assert measure_snr(clean, noisy) == pytest.approx(snr, abs=0.05)


class TestTdlC:
    def test_default_profile(self):
        p = TdlCProfile.default()
        assert [t.delay_samples for t in p.taps] == [0, 2, 5]
        assert [t.fading for t in p.taps] == [Fading.LOS, Fading.RAYLEIGH, Fading.RAYLEIGH]

    def test_profile_powers_must_sum_to_one(self):
        with pytest.raises(ValueError):
            TdlCProfile((Tap(0, 0.5), Tap(1, 0.4)))

    def test_profile_dict_round_trip(self):
        p = TdlCProfile.default()
        assert TdlCProfile.from_dict(p.to_dict()) == p

    def test_block_gain_energy(self):
        g = draw_block_gains(TdlCProfile.default(), 10_000, np.random.default_rng(0))
        assert np.mean(np.sum(np.abs(g) ** 2, axis=0)) == pytest.approx(1.0, rel=0.02)

    def test_received_energy(self):
        cfg = PreambleConfig(n_rep=8)
        x = gen_preamble(cfg)
        powers = []
        # 313 preambles of 32 blocks: about 1e4 fading realisations
        for seed in range(313):
            y = apply_impairments(x, ImpairmentConfig(channel=ChannelType.TDLC, seed=seed), block_len=cfg.sg_len)
            powers.append(np.mean(np.abs(y.samples[5:len(x)]) ** 2))
        assert np.mean(powers) == pytest.approx(1.0, rel=0.02)

    def test_gain_constant_within_group(self):
        cfg = PreambleConfig(n_rep=1)
        x = gen_preamble(cfg)
        y = apply_impairments(x, ImpairmentConfig(channel="TdlC", seed=3), block_len=cfg.sg_len).samples
        # inside a group every tap sees the same tone, so y/x is constant
        r = y[600:3000] / x.samples[600:3000]
        assert np.max(np.abs(r - r[0])) < 1e-9
