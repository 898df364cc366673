from __future__ import annotations

import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
import soundfile as sf

from targetsound.dsp import (
    FrameSpec,
    Spectrogram,
    Waveform,
    istft,
    read_wav,
    resample,
    si_sdr,
    spectrogram_energy,
    stft,
    trim_silence,
    write_wav,
)
from targetsound.errors import DegenerateReference, InputTooShort, ShapeMismatch


def noise(n: int, seed: int = 0, sr: int = 16000) -> Waveform:
    return Waveform(np.random.default_rng(seed).standard_normal(n), sr)


class StftTests(unittest.TestCase):
    def test_frame_count_follows_centred_padding(self) -> None:
        spec = FrameSpec(512, 128)
        for n in (512, 1000, 16000):
            self.assertEqual(stft(noise(n), spec).n_frames, 1 + n // 128)
        self.assertEqual(stft(noise(1000), spec).bins.shape[1], 257)

    def test_round_trip_reconstructs_signal(self) -> None:
        for window, hop, n in ((512, 128, 4000), (256, 64, 3001), (64, 32, 999)):
            w = noise(n, seed=window)
            back = istft(stft(w, FrameSpec(window, hop)), n)
            self.assertEqual(len(back), n)
            self.assertLess(np.max(np.abs(back.samples - w.samples)), 1e-9)

    def test_short_input_is_rejected(self) -> None:
        with self.assertRaises(InputTooShort):
            stft(noise(100), FrameSpec(512, 128))

    def test_istft_checks_shapes(self) -> None:
        spec = FrameSpec(512, 128)
        with self.assertRaises(ShapeMismatch):
            istft(Spectrogram(np.zeros((4, 100), dtype=complex), spec), 1000)
        with self.assertRaises(ShapeMismatch):
            istft(stft(noise(1000), spec), 0)

    def test_hop_above_window_is_invalid(self) -> None:
        with self.assertRaises(ValueError):
            FrameSpec(128, 256)

    def test_energy_matches_windowed_frames(self) -> None:
        spec = FrameSpec(256, 64)
        w = noise(2000, seed=3)
        padded = np.pad(w.samples, (128, 128), mode="reflect")
        window = spec.window()
        expected = 0.0
        for t in range(spec.n_frames(len(w))):
            frame = padded[t * 64 : t * 64 + 256] * window
            expected += float(np.sum(frame**2))
        self.assertAlmostEqual(spectrogram_energy(stft(w, spec)), expected, places=6)

    def test_bin_centred_tone_matches_direct_dft(self) -> None:
        sr, spec, k = 16000, FrameSpec(512, 128), 32
        tone = Waveform(np.sin(2 * np.pi * (k * sr / 512) * np.arange(4096) / sr), sr)
        bins = stft(tone, spec).bins
        dft = np.exp(-2j * np.pi * np.outer(np.arange(257), np.arange(512)) / 512)
        for t in range(2, (4096 - 256) // 128):
            frame = tone.samples[t * 128 - 256 : t * 128 + 256] * spec.window()
            np.testing.assert_allclose(bins[t], dft @ frame, atol=1e-8)
            power = np.abs(bins[t]) ** 2
            # a Hann window spreads an on-bin tone over the two neighbouring bins only
            self.assertGreaterEqual(power[k - 1 : k + 2].sum() / power.sum(), 0.99)
            self.assertEqual(int(np.argmax(power)), k)

    def test_single_frame_impulse_inverts(self) -> None:
        spec = FrameSpec(64, 32)
        impulse = np.zeros(64)
        impulse[32] = 1.0
        out = istft(Spectrogram(np.fft.rfft(impulse)[None, :], spec, 8000), 32)
        expected = np.zeros(32)
        expected[0] = 1.0
        np.testing.assert_allclose(out.samples, expected, atol=1e-12)


class ResampleTests(unittest.TestCase):
    def test_same_rate_is_identity(self) -> None:
        w = noise(1234)
        out = resample(w, 16000)
        np.testing.assert_array_equal(out.samples, w.samples)

    def test_output_length_and_rate(self) -> None:
        out = resample(noise(16000), 8000)
        self.assertEqual(out.sample_rate, 8000)
        self.assertEqual(len(out), 8000)
        self.assertEqual(len(resample(noise(1001, sr=44100), 16000)), int(math.floor(1001 * 160 / 441 + 0.5)))

    def test_low_tone_survives_downsampling(self) -> None:
        t = np.arange(16000) / 16000
        w = Waveform(np.sin(2 * np.pi * 440 * t), 16000)
        out = resample(w, 8000)
        expected = np.sin(2 * np.pi * 440 * np.arange(8000) / 8000)
        self.assertLess(np.max(np.abs(out.samples[200:-200] - expected[200:-200])), 2e-2)

    def test_constant_stays_constant(self) -> None:
        for source, target in ((16000, 8000), (8000, 16000), (44100, 16000)):
            out = resample(Waveform(np.full(source, 0.5), source), target)
            np.testing.assert_allclose(out.samples, 0.5, atol=5e-3)


class TrimSilenceTests(unittest.TestCase):
    def test_zero_head_and_tail_are_removed(self) -> None:
        sr = 16000
        tone = 0.5 * np.sin(2 * np.pi * 300 * np.arange(8000) / sr)
        w = Waveform(np.concatenate([np.zeros(4000), tone, np.zeros(4000)]), sr)
        out = trim_silence(w)
        # 25 ms frames line up with the 4000-sample silences
        self.assertEqual(len(out), 8000)
        np.testing.assert_array_equal(out.samples, tone)

    def test_silent_clip_comes_back_empty(self) -> None:
        self.assertEqual(len(trim_silence(Waveform(np.zeros(1600), 16000))), 0)

    def test_threshold_must_be_negative(self) -> None:
        with self.assertRaises(ValueError):
            trim_silence(noise(1600), threshold_db=0.0)

    def test_trimming_twice_changes_nothing(self) -> None:
        sr = 16000
        tone = 0.5 * np.sin(2 * np.pi * 300 * np.arange(8000) / sr)
        w = Waveform(np.concatenate([np.zeros(4000), tone, 1e-4 * np.ones(2000), tone, np.zeros(4000)]), sr)
        once = trim_silence(w)
        np.testing.assert_array_equal(trim_silence(once).samples, once.samples)


class SiSdrTests(unittest.TestCase):
    def test_hand_derived_fixture(self) -> None:
        value = si_sdr(np.array([1.0, 0.0, -1.0]), np.array([2.0, 0.0, 1.0]))
        self.assertAlmostEqual(value, 10 * math.log10(1 / 3), places=9)
        self.assertAlmostEqual(value, -4.771, delta=1e-3)

    def test_scale_invariance(self) -> None:
        rng = np.random.default_rng(1)
        ref = rng.standard_normal(2000)
        est = ref + 0.3 * rng.standard_normal(2000)
        base = si_sdr(est, ref)
        for c in (0.1, 1.0, 3.7, 100.0):
            self.assertLess(abs(si_sdr(c * est, ref) - base), 1e-6)

    def test_perfect_estimate_hits_ceiling(self) -> None:
        ref = noise(500).samples
        self.assertEqual(si_sdr(ref, ref), 60.0)
        self.assertEqual(si_sdr(ref + 5.0, ref), 60.0)

    def test_orthogonal_and_zero_estimates(self) -> None:
        ref = np.array([1.0, -1.0, 1.0, -1.0])
        self.assertEqual(si_sdr(np.array([1.0, 1.0, -1.0, -1.0]), ref), -60.0)
        self.assertEqual(si_sdr(np.zeros(4), ref), -60.0)

    def test_constant_reference_is_degenerate(self) -> None:
        with self.assertRaises(DegenerateReference):
            si_sdr(np.array([1.0, 2.0, 3.0]), np.ones(3))

    def test_length_mismatch(self) -> None:
        with self.assertRaises(ShapeMismatch):
            si_sdr(np.zeros(3), np.ones(4))

    def test_constant_offset_is_ignored(self) -> None:
        rng = np.random.default_rng(2)
        ref = rng.standard_normal(1000)
        est = ref + 0.5 * rng.standard_normal(1000)
        base = si_sdr(est, ref)
        self.assertLess(base, 60.0)
        self.assertAlmostEqual(si_sdr(est + 3.0, ref), base, places=9)
        self.assertAlmostEqual(si_sdr(est, ref - 2.0), base, places=9)


class WavIoTests(unittest.TestCase):
    def test_float_round_trip_is_exact(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = Path(tmp_dir) / "clip.wav"
            w = Waveform(np.random.default_rng(0).uniform(-0.9, 0.9, 800).astype(np.float32), 8000)
            write_wav(path, w)
            back = read_wav(path)
            self.assertEqual(back.sample_rate, 8000)
            np.testing.assert_array_equal(back.samples, w.samples)

    def test_resamples_on_read(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = write_wav(Path(tmp_dir) / "clip.wav", noise(16000))
            self.assertEqual(len(read_wav(path, 8000)), 8000)

    def test_stereo_is_refused(self) -> None:
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = Path(tmp_dir) / "stereo.wav"
            sf.write(str(path), np.zeros((100, 2)), 8000, subtype="FLOAT")
            with self.assertRaises(ShapeMismatch):
                read_wav(path)


if __name__ == "__main__":
    unittest.main()
