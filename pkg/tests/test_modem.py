"""Physical-layer tests: slot arithmetic, projections, sync, robustness."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import awgn_per_band_snr
from ultralink.audio import SampleBuffer
from ultralink.bits import as_bits
from ultralink.modem import (
    ConfigError,
    ModemConfig,
    demodulate,
    detect_preamble,
    modulate,
    spectral_power_outside,
    tone_energy,
)

CFG10 = ModemConfig(bit_rate=10)
CFG166 = ModemConfig(bit_rate=166)


class TestConfig:
    def test_defaults_valid(self):
        cfg = ModemConfig()
        assert cfg.f0 == 18500 and cfg.f1 == 19500
        assert cfg.samples_per_bit == round(48000 / cfg.bit_rate)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"f0": 17000.0},                      # below band
            {"f1": 25000.0},                      # above band
            {"f0": 19000.0, "f1": 19000.0},       # equal carriers
            {"f0": 19000.0, "f1": 19200.0, "bit_rate": 166.0},  # separation < 2x rate
            {"bit_rate": 4000.0},                 # < 16 samples per bit
            {"sample_rate": 30000},               # Nyquist violation
            {"gain": 0.0},
            {"gain": 1.2},
        ],
    )
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            ModemConfig(**kwargs)


class TestModulate:
    def test_slot_arithmetic_exact(self):
        buf = modulate("10", CFG10)
        assert len(buf) == 9600
        # first slot carries f1 (bit '1'), second f0
        assert tone_energy(buf, 19500, (0, 4800)) > 100 * tone_energy(buf, 18500, (0, 4800))
        assert tone_energy(buf, 18500, (4800, 9600)) > 100 * tone_energy(buf, 19500, (4800, 9600))

    def test_empty_bits_empty_buffer(self):
        assert len(modulate("", CFG166)) == 0

    def test_length_formula(self, rng):
        for n in (1, 7, 100):
            bits = rng.integers(0, 2, n, dtype=np.uint8)
            assert len(modulate(bits, CFG166)) == n * CFG166.samples_per_bit

    def test_peak_amplitude_is_gain(self, rng):
        buf = modulate(rng.integers(0, 2, 50, dtype=np.uint8), CFG166)
        assert np.abs(buf.samples).max() == pytest.approx(0.9, abs=1e-3)

    def test_phase_continuity_no_jumps(self, rng):
        # continuous-phase FSK: the largest sample-to-sample step never
        # exceeds the steepest slope of either carrier
        buf = modulate(rng.integers(0, 2, 64, dtype=np.uint8), CFG166)
        max_step = 0.9 * 2 * np.pi * 19500 / 48000
        assert np.abs(np.diff(buf.samples)).max() <= max_step * 1.001

    def test_preamble_spectrogram_alternates(self):
        buf = modulate("101010", CFG10)
        spb = CFG10.samples_per_bit
        for k in range(6):
            window = (k * spb, (k + 1) * spb)
            hot = 19500 if k % 2 == 0 else 18500
            cold = 18500 if k % 2 == 0 else 19500
            assert tone_energy(buf, hot, window) > 100 * tone_energy(buf, cold, window)

    def test_emitted_power_stays_in_band(self, rng):
        for cfg in (CFG10, CFG166):
            bits = rng.integers(0, 2, 60, dtype=np.uint8)
            assert spectral_power_outside(modulate(bits, cfg), 17000, 25000) < 0.01


class TestToneEnergy:
    def test_unit_tone_is_quarter(self):
        fs = 48000
        n = np.arange(100 * fs // 19000 + fs)  # comfortably over 100 periods
        buf = SampleBuffer(np.sin(2 * np.pi * 19000 / fs * n), fs)
        assert tone_energy(buf, 19000, (0, len(buf))) == pytest.approx(0.25, rel=0.01)

    def test_silence_is_zero(self):
        buf = SampleBuffer(np.zeros(48000), 48000)
        assert tone_energy(buf, 19000, (0, 48000)) == 0.0

    def test_off_frequency_leakage_small(self):
        fs = 48000
        buf = SampleBuffer(np.sin(2 * np.pi * 18500 / fs * np.arange(4800)), fs)
        on = tone_energy(buf, 18500, (0, 4800))
        off = tone_energy(buf, 19500, (0, 4800))
        assert off < 0.01 * on

    def test_argument_validation(self):
        buf = SampleBuffer(np.zeros(1000), 48000)
        with pytest.raises(ValueError):
            tone_energy(buf, 19000, (0, 2000))
        with pytest.raises(ValueError):
            tone_energy(buf, 0.0, (0, 1000))
        with pytest.raises(ValueError):
            tone_energy(buf, 24000.0, (0, 1000))


class TestDemodulate:
    def test_noiseless_roundtrip_both_rates(self, rng):
        for cfg in (CFG10, CFG166):
            bits = rng.integers(0, 2, 200 if cfg is CFG10 else 2000, dtype=np.uint8)
            out = demodulate(modulate(bits, cfg), cfg)
            assert np.array_equal(out.bits, bits)
            assert out.consumed == bits.size * cfg.samples_per_bit
            assert np.all(out.confidences > 0.9)

    def test_swapped_carriers_give_complement(self, rng):
        bits = rng.integers(0, 2, 300, dtype=np.uint8)
        buf = modulate(bits, CFG166)
        out = demodulate(buf, CFG166.with_swapped_carriers())
        assert np.array_equal(out.bits, 1 - bits)

    def test_trailing_partial_slot_discarded(self, rng):
        bits = rng.integers(0, 2, 10, dtype=np.uint8)
        buf = modulate(bits, CFG166)
        clipped = buf.slice(0, len(buf) - 17)
        out = demodulate(clipped, CFG166)
        assert out.bits.size == 9
        assert out.consumed == 9 * CFG166.samples_per_bit

    def test_silence_zero_confidence(self):
        buf = SampleBuffer(np.zeros(CFG166.samples_per_bit * 4), 48000)
        out = demodulate(buf, CFG166)
        assert np.all(out.confidences == 0.0)

    def test_roundtrip_at_20db_per_band_snr(self, rng):
        errors = 0
        for seed in range(10):
            bits = np.random.default_rng(seed).integers(0, 2, 1000, dtype=np.uint8)
            noisy = awgn_per_band_snr(modulate(bits, CFG166), 20.0,
                                      tone_power=0.9**2 / 2, seed=seed)
            out = demodulate(noisy, CFG166)
            errors += int(np.sum(out.bits != bits))
        assert errors == 0

    def test_ber_monotone_in_snr(self):
        # Monte-Carlo: measured BER never increases with per-band SNR
        bers = []
        for snr in (0.0, 5.0, 10.0, 15.0, 20.0):
            errors = total = 0
            for seed in range(4):
                bits = np.random.default_rng(100 + seed).integers(0, 2, 1500, dtype=np.uint8)
                noisy = awgn_per_band_snr(modulate(bits, CFG166), snr,
                                          tone_power=0.9**2 / 2, seed=1000 + seed)
                out = demodulate(noisy, CFG166)
                errors += int(np.sum(out.bits != bits))
                total += bits.size
            bers.append(errors / total)
        assert all(a >= b for a, b in zip(bers, bers[1:]))
        assert bers[0] > 0.1        # at 0 dB the channel is genuinely bad
        assert bers[-1] == 0.0      # at 20 dB it is clean

    @given(st.lists(st.integers(0, 1), min_size=0, max_size=40))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_property(self, bit_list):
        bits = as_bits(bit_list)
        out = demodulate(modulate(bits, CFG166), CFG166)
        assert np.array_equal(out.bits, bits)


class TestDetectPreamble:
    def test_embedded_preamble_located(self, rng):
        payload = rng.integers(0, 2, 40, dtype=np.uint8)
        signal = modulate(np.concatenate([as_bits("101010"), payload]), CFG10)
        buf = SampleBuffer(
            np.concatenate([np.zeros(12345), signal.samples, np.zeros(4000)]), 48000
        )
        hit = detect_preamble(buf, CFG10)
        assert hit is not None
        assert abs(hit.offset - 12345) <= 480  # within 10% of a bit slot
        assert hit.score > 0.9

    def test_silence_returns_none(self):
        buf = SampleBuffer(np.zeros(48000 * 4), 48000)
        assert detect_preamble(buf, CFG10) is None

    def test_constant_tone_returns_none(self):
        assert detect_preamble(modulate("1" * 12, CFG10), CFG10) is None
        assert detect_preamble(modulate("0" * 12, CFG10), CFG10) is None

    def test_short_buffer_returns_none(self):
        buf = SampleBuffer(np.zeros(CFG166.samples_per_bit * 5), 48000)
        assert detect_preamble(buf, CFG166) is None

    def test_search_from_skips_earlier_hit(self):
        frame_bits = np.concatenate([as_bits("101010"), np.zeros(40, dtype=np.uint8)])
        one = modulate(frame_bits, CFG166).samples
        gap = np.zeros(8 * CFG166.samples_per_bit)
        buf = SampleBuffer(np.concatenate([one, gap, one]), 48000)
        first = detect_preamble(buf, CFG166)
        second = detect_preamble(buf, CFG166, search_from=first.offset + len(one))
        assert abs(first.offset - 0) <= 40
        assert abs(second.offset - (len(one) + len(gap))) <= 40
