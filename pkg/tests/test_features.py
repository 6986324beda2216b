import struct

import librosa
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bookstyle.config import FeatureConfig
from bookstyle.errors import EmptyAudio, FeatureCacheError, SampleRateMismatch
from bookstyle.features import (
    AcousticFeatures,
    extract_features,
    low_band,
    magnitude_spectrogram,
    num_frames,
    phoneme_average,
    read_feature_cache,
    write_feature_cache,
)

CFG = FeatureConfig()


def tone(freq, seconds=1.0, amp=0.5, sr=16000):
    t = np.arange(int(seconds * sr)) / sr
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float32)


def test_one_second_gives_62_frames():
    feats = extract_features(tone(220), 16000, CFG)
    assert feats.n_frames == 62
    assert feats.mel.shape == (62, 80)
    assert feats.f0.shape == feats.energy.shape == (62,)
    assert feats.mel20.shape == (62, 20)


def test_frame_rate_from_hop():
    # hop 240 at 16 kHz
    assert CFG.sample_rate / CFG.hop_length == pytest.approx(66.6667, abs=1e-4)
    assert CFG.frame_seconds == pytest.approx(0.015)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1200, max_value=20000))
def test_frame_count_formula(n):
    assert num_frames(n, CFG) == (n - 1200) // 240 + 1


def test_magnitude_matches_reference_stft():
    audio = np.random.default_rng(0).standard_normal(9000).astype(np.float32)
    ours = magnitude_spectrogram(audio, CFG)
    ref = np.abs(librosa.stft(audio, n_fft=1200, hop_length=240, win_length=1200, window="hann", center=False)).T
    assert ours.shape == ref.shape
    np.testing.assert_allclose(ours, ref, rtol=1e-4, atol=1e-4)


def test_log_mel_matches_reference_filterbank():
    audio = tone(330, 0.5)
    feats = extract_features(audio, 16000, CFG)
    spec = np.abs(librosa.stft(audio, n_fft=1200, hop_length=240, center=False)) ** 1
    fb = librosa.filters.mel(sr=16000, n_fft=1200, n_mels=80, fmin=0, fmax=8000)
    ref = np.log(np.maximum(fb @ spec, 1e-5)).T
    np.testing.assert_allclose(feats.mel, ref, atol=1e-3)


def test_energy_is_spectral_l2_norm():
    audio = tone(500, 0.3)
    feats = extract_features(audio, 16000, CFG)
    spec = np.abs(librosa.stft(audio, n_fft=1200, hop_length=240, center=False))
    np.testing.assert_allclose(feats.energy, np.linalg.norm(spec, axis=0), rtol=1e-4)


def test_silence_has_zero_energy_and_f0():
    feats = extract_features(np.zeros(16000, dtype=np.float32), 16000, CFG)
    assert np.all(feats.energy == 0)
    assert np.all(feats.f0 == 0)


@pytest.mark.parametrize("freq", [110.0, 200.0, 310.0])
def test_f0_tracks_a_sine(freq):
    feats = extract_features(tone(freq), 16000, CFG)
    voiced = feats.f0[feats.f0 > 0]
    assert len(voiced) > 0.9 * feats.n_frames
    assert np.median(voiced) == pytest.approx(freq, rel=0.01)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.001, 0.9))
def test_feature_invariants_on_noise(seed, amp):
    audio = (amp * np.random.default_rng(seed).standard_normal(4000)).astype(np.float32)
    feats = extract_features(audio, 16000, CFG)
    assert np.all(feats.energy >= 0)
    f0 = feats.f0
    assert np.all((f0 == 0) | ((f0 >= CFG.f0_min) & (f0 <= CFG.f0_max)))
    assert np.array_equal(feats.mel20, feats.mel[:, :20])


def test_mel20_ignores_upper_bins():
    feats = extract_features(tone(200), 16000, CFG)
    mel = feats.mel.copy()
    mel[:, 20:] += 7.0
    assert np.array_equal(low_band(mel), low_band(feats.mel))
    assert low_band(mel).base is None  # a copy, not a view


def test_deterministic():
    audio = np.random.default_rng(3).standard_normal(8000).astype(np.float32) * 0.1
    a, b = extract_features(audio, 16000, CFG), extract_features(audio, 16000, CFG)
    assert a.mel.tobytes() == b.mel.tobytes()
    assert a.f0.tobytes() == b.f0.tobytes()


def test_short_audio_rejected():
    with pytest.raises(EmptyAudio):
        extract_features(np.zeros(1199, dtype=np.float32), 16000, CFG)


def test_wrong_rate_rejected():
    with pytest.raises(SampleRateMismatch):
        extract_features(np.zeros(22050, dtype=np.float32), 22050, CFG)


def test_stereo_rejected():
    with pytest.raises(ValueError):
        extract_features(np.zeros((16000, 2), dtype=np.float32), 16000, CFG)


def test_cache_roundtrip_and_layout(tmp_path):
    rng = np.random.default_rng(1)
    feats = AcousticFeatures(rng.standard_normal((5, 80)).astype(np.float32), np.arange(5, dtype=np.float32), np.ones(5, dtype=np.float32))
    path = tmp_path / "x.styb"
    write_feature_cache(path, feats)
    blob = path.read_bytes()
    assert len(blob) == 16 + 4 * 5 * 82
    assert struct.unpack("<4sIII", blob[:16]) == (b"STYB", 1, 5, 80)
    assert np.array_equal(np.frombuffer(blob[16 : 16 + 4 * 400], dtype="<f4").reshape(5, 80), feats.mel)
    back = read_feature_cache(path)
    assert np.array_equal(back.mel, feats.mel) and np.array_equal(back.f0, feats.f0) and np.array_equal(back.energy, feats.energy)


def test_cache_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.styb"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(FeatureCacheError):
        read_feature_cache(path)


def test_phoneme_average():
    values = np.array([1.0, 3.0, 5.0, 5.0, 5.0, 2.0])
    np.testing.assert_allclose(phoneme_average(values, [2, 0, 3, 1]), [2.0, 0.0, 5.0, 2.0])
