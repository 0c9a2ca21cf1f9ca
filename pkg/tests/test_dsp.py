"""Spectral features: STFT/iSTFT, mel filterbank, MFCC, reshaping."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tinysound import dsp
from tinysound.audio_io import AudioClip
from tinysound.errors import ConfigError, DecodeError

from conftest import SR, sine

CFG = dsp.SpectrogramConfig()  # 1024 fft, hop 512, 128 mels, 44.1 kHz


def white_noise(n, seed=0, scale=0.1):
    return scale * np.random.default_rng(seed).normal(size=n)


class TestConfig:
    def test_rejects_window_longer_than_fft(self):
        with pytest.raises(ConfigError):
            dsp.SpectrogramConfig(n_fft=512, win_length=1024)

    def test_rejects_too_many_mels(self):
        with pytest.raises(ConfigError):
            dsp.SpectrogramConfig(n_fft=64, win_length=64, n_mels=128)

    def test_rejects_bad_hop(self):
        with pytest.raises(ConfigError):
            dsp.SpectrogramConfig(hop_length=0)


class TestStft:
    def test_bin_centered_sine_peaks_at_its_bin(self):
        freq = 10 * SR / CFG.n_fft
        spec = dsp.stft(AudioClip(sine(freq), SR), CFG)
        mags = np.abs(spec.data)
        assert np.all(mags[5:-5].argmax(axis=1) == 10)

    def test_zero_signal_zero_spectrogram(self):
        spec = dsp.stft(AudioClip(np.zeros(8192), SR), CFG)
        np.testing.assert_array_equal(spec.data, 0)

    def test_frame_count_matches_hop_rule(self):
        spec = dsp.stft(AudioClip(np.zeros(220500), SR), CFG)
        assert spec.data.shape == (430, CFG.n_bins)
        assert dsp.frame_count(44100, 512) == 86

    def test_linearity(self):
        x = white_noise(9000, seed=4)
        a = dsp.stft(AudioClip(2.5 * x, SR), CFG).data
        b = 2.5 * dsp.stft(AudioClip(x, SR), CFG).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_parseval_within_five_percent(self):
        x = white_noise(44100, seed=8)
        spec = dsp.stft(AudioClip(x, SR), CFG)
        window = dsp.hann_window(CFG.win_length)
        pad = CFG.n_fft // 2
        padded = np.pad(x, pad, mode="reflect")
        windowed_power = sum(
            np.sum((padded[k * CFG.hop_length : k * CFG.hop_length + CFG.n_fft] * window) ** 2)
            for k in range(spec.data.shape[0])
        )
        mags2 = np.abs(spec.data) ** 2
        onesided = mags2.copy()
        onesided[:, 1:-1] *= 2  # fold negative frequencies of the real FFT
        spectral_power = onesided.sum() / CFG.n_fft
        assert abs(spectral_power - windowed_power) / windowed_power < 0.05


class TestIstft:
    def test_white_noise_roundtrip(self):
        x = white_noise(44100, seed=1)
        rec = dsp.istft(dsp.stft(AudioClip(x, SR), CFG)).samples
        interior = slice(CFG.n_fft, 43000)
        err = rec[interior] - x[interior]
        assert np.sqrt(np.mean(err**2)) / np.sqrt(np.mean(x[interior] ** 2)) < 1e-4

    def test_zero_spectrogram_gives_zero_signal(self):
        spec = dsp.stft(AudioClip(np.zeros(8192), SR), CFG)
        np.testing.assert_array_equal(dsp.istft(spec).samples, 0)

    def test_sine_roundtrip_preserves_frequency(self):
        x = sine(880.0)
        rec = dsp.istft(dsp.stft(AudioClip(x, SR), CFG)).samples
        spec = np.abs(np.fft.rfft(rec[2048:-2048] * np.hanning(rec.size - 4096)))
        peak = spec.argmax() * SR / (rec.size - 4096)
        assert abs(peak - 880.0) < 3.0


class TestMelFilterbank:
    def test_rows_nonnegative_single_peak(self):
        fb = dsp.mel_filterbank(CFG)
        assert np.all(fb >= 0)
        for row in fb:
            assert np.count_nonzero(row == row.max()) == 1

    def test_centers_strictly_increasing(self):
        edges = dsp.mel_to_hz(np.linspace(0, dsp.hz_to_mel(SR / 2), CFG.n_mels + 2))
        centers = edges[1:-1]
        assert np.all(np.diff(centers) > 0)

    def test_flat_spectrum_response_has_no_zeros(self):
        fb = dsp.mel_filterbank(CFG)
        response = fb @ np.ones(CFG.n_bins)
        assert np.all(response > 0)

    def test_too_many_mels_rejected(self):
        with pytest.raises(ConfigError):
            dsp.SpectrogramConfig(n_fft=128, win_length=128, n_mels=100)


class TestMelSpectrogram:
    def test_five_second_shape(self):
        feats = dsp.mel_spectrogram(AudioClip(white_noise(220500), SR), CFG)
        assert feats.shape == (430, 128)

    def test_one_second_shape(self):
        feats = dsp.mel_spectrogram(AudioClip(white_noise(44100), SR), CFG)
        assert feats.shape == (86, 128)

    def test_silence_is_flat_floor(self):
        feats = dsp.mel_spectrogram(AudioClip(np.zeros(44100), SR), CFG)
        assert np.all(feats.data == feats.data.flat[0])

    def test_pure_tone_argmax_at_nearest_band(self):
        # tested on bands wide enough to span several FFT bins; below ~band 20
        # the 43 Hz bin grid is coarser than the filter spacing
        centers = dsp.mel_to_hz(np.linspace(0, dsp.hz_to_mel(SR / 2), CFG.n_mels + 2))[1:-1]
        for band in (20, 40, 64, 90, 120):
            feats = dsp.mel_spectrogram(AudioClip(sine(centers[band]), SR), CFG)
            interior = feats.data[5:-5]
            assert np.all(interior.argmax(axis=1) == band), f"band {band}"


class TestMfcc:
    def test_dct_matrix_orthonormal(self):
        mat = dsp.dct_matrix(128)
        np.testing.assert_allclose(mat.T @ mat, np.eye(128), atol=1e-9)

    def test_constant_frame_concentrates_in_dc(self):
        c = -3.7
        coeffs = dsp.dct_matrix(128) @ np.full(128, c)
        assert abs(coeffs[0] - c * np.sqrt(128)) < 1e-9
        np.testing.assert_allclose(coeffs[1:], 0, atol=1e-9)

    def test_shape_five_seconds(self):
        feats = dsp.mfcc(AudioClip(white_noise(220500), SR), CFG, 128)
        assert feats.shape == (430, 128)
        assert feats.kind == "mfcc"

    def test_coefficient_truncation(self):
        feats = dsp.mfcc(AudioClip(white_noise(44100), SR), CFG, 13)
        assert feats.shape == (86, 13)

    def test_too_many_coeffs_rejected(self):
        with pytest.raises(ConfigError):
            dsp.mfcc(AudioClip(white_noise(4096), SR), CFG, 200)


class TestDownsampleColumns:
    def test_factor_one_identity(self):
        feats = dsp.mel_spectrogram(AudioClip(white_noise(44100), SR), CFG)
        assert dsp.downsample_columns(feats, 1) is feats

    def test_factor_three_ceil(self):
        feats = dsp.FeatureMatrix(np.zeros((430, 4)), "mel", 86.0)
        assert dsp.downsample_columns(feats, 3).shape == (144, 4)
        # a centered 431-frame count would floor to 143; we keep ceil(430/3)

    def test_factor_two(self):
        feats = dsp.FeatureMatrix(np.zeros((430, 4)), "mel", 86.0)
        assert dsp.downsample_columns(feats, 2).shape == (215, 4)

    def test_keeps_every_nth_frame(self):
        data = np.arange(20, dtype=float).reshape(10, 2)
        feats = dsp.FeatureMatrix(data, "mel", 1.0)
        np.testing.assert_array_equal(dsp.downsample_columns(feats, 4).data, data[[0, 4, 8]])

    def test_rejects_zero(self):
        feats = dsp.FeatureMatrix(np.zeros((4, 4)), "mel", 1.0)
        with pytest.raises(ValueError):
            dsp.downsample_columns(feats, 0)


class TestReshapeAmplitudes:
    def test_row_major_layout(self):
        clip = AudioClip(np.array([1, 2, 3, 4, 5, 6]) / 10.0, SR)
        feats = dsp.reshape_amplitudes(clip, 2, 3)
        np.testing.assert_array_equal(feats.data, [[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]])

    def test_512_square_consumes_262144_samples(self):
        clip = AudioClip(np.zeros(262144), SR)
        assert dsp.reshape_amplitudes(clip, 512, 512).shape == (512, 512)
        with pytest.raises(ValueError):
            dsp.reshape_amplitudes(AudioClip(np.zeros(262143), SR), 512, 512)

    def test_flatten_inverts_prefix(self):
        x = white_noise(100, seed=9)
        feats = dsp.reshape_amplitudes(AudioClip(x, SR), 7, 9)
        np.testing.assert_array_equal(feats.data.ravel(), x[:63])


class TestNormalize01:
    def test_example(self):
        feats = dsp.FeatureMatrix(np.array([[0.0, 5.0], [10.0, 5.0]]), "mel", 1.0)
        np.testing.assert_array_equal(dsp.normalize01(feats).data, [[0.0, 0.5], [1.0, 0.5]])

    def test_constant_matrix_maps_to_zeros(self):
        feats = dsp.FeatureMatrix(np.full((3, 3), 7.0), "mel", 1.0)
        np.testing.assert_array_equal(dsp.normalize01(feats).data, 0)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_range_property(self, seed):
        data = np.random.default_rng(seed).normal(size=(5, 7))
        out = dsp.normalize01(dsp.FeatureMatrix(data, "mel", 1.0)).data
        assert out.min() == 0.0
        assert out.max() == 1.0


class TestFeatureFile:
    def test_roundtrip(self, tmp_path):
        feats = dsp.mel_spectrogram(AudioClip(white_noise(22050), SR), CFG)
        path = tmp_path / "x.tsfm"
        dsp.save_features(path, feats)
        loaded = dsp.load_features(path, feats.frame_rate)
        assert loaded.kind == feats.kind
        np.testing.assert_allclose(loaded.data, feats.data, atol=1e-4)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tsfm"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DecodeError):
            dsp.load_features(path)

    def test_truncated_payload(self, tmp_path):
        feats = dsp.FeatureMatrix(np.ones((4, 4)), "mel", 1.0)
        path = tmp_path / "t.tsfm"
        dsp.save_features(path, feats)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DecodeError):
            dsp.load_features(path)
