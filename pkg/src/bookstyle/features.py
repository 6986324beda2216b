"""Acoustic feature extraction and the binary feature cache.

Framing is center-free: frame ``t`` covers samples ``[t*hop, t*hop + win)``, so
a clip of ``L`` samples yields ``(L - win) // hop + 1`` frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import librosa
import numpy as np
from scipy.signal import get_window

from .config import FeatureConfig
from .errors import EmptyAudio, FeatureCacheError, SampleRateMismatch

CACHE_MAGIC = b"STYB"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass
class AcousticFeatures:
    mel: np.ndarray  # (T, n_mels) natural-log mel magnitudes
    f0: np.ndarray  # (T,) Hz, 0.0 where unvoiced
    energy: np.ndarray  # (T,)

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])

    @property
    def mel20(self) -> np.ndarray:
        return low_band(self.mel, 20)


def low_band(mel: np.ndarray, n_bins: int = 20) -> np.ndarray:
    """Leading ``n_bins`` mel channels, copied so later edits to ``mel`` cannot leak in."""
    return np.array(mel[:, :n_bins], copy=True)


def num_frames(n_samples: int, cfg: FeatureConfig) -> int:
    if n_samples < cfg.win_length:
        return 0
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def num_samples(n_frames: int, cfg: FeatureConfig) -> int:
    """Shortest clip length that frames to exactly ``n_frames``."""
    return (n_frames - 1) * cfg.hop_length + cfg.win_length


def frame_signal(audio: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    n = num_frames(len(audio), cfg)
    frames = np.lib.stride_tricks.sliding_window_view(audio, cfg.win_length)
    return frames[:: cfg.hop_length][:n]


@lru_cache(maxsize=8)
def _window(win_length: int, n_fft: int) -> np.ndarray:
    win = get_window("hann", win_length, fftbins=True)
    if n_fft > win_length:
        win = librosa.util.pad_center(win, size=n_fft)
    return win


@lru_cache(maxsize=8)
def _mel_basis(sr: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return librosa.filters.mel(sr=sr, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax)


def mel_basis(cfg: FeatureConfig) -> np.ndarray:
    """Slaney-normalised filterbank, shape (n_mels, n_fft // 2 + 1)."""
    return _mel_basis(cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)


def magnitude_spectrogram(audio: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """|STFT| with a periodic Hann window, shape (T, n_fft // 2 + 1)."""
    frames = frame_signal(audio, cfg)
    if cfg.n_fft > cfg.win_length:
        pad = (cfg.n_fft - cfg.win_length) // 2
        frames = np.pad(frames, ((0, 0), (pad, cfg.n_fft - cfg.win_length - pad)))
    return np.abs(np.fft.rfft(frames * _window(cfg.win_length, cfg.n_fft), n=cfg.n_fft, axis=1))


def log_mel(magnitude: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    mel = magnitude @ mel_basis(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor))


def frame_energy(magnitude: np.ndarray) -> np.ndarray:
    return np.linalg.norm(magnitude, axis=1)


def yin_f0(audio: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Frame-level F0 by the YIN cumulative-mean-normalised difference.

    A frame is voiced when the normalised difference dips below
    ``cfg.yin_threshold`` inside the lag range allowed by ``f0_min``/``f0_max``
    and its RMS exceeds ``cfg.voicing_rms``; unvoiced frames are 0.
    """
    frames = frame_signal(audio, cfg).astype(np.float64)
    n_frames, win = frames.shape
    sr = cfg.sample_rate
    tau_min = max(2, int(np.floor(sr / cfg.f0_max)))
    tau_max = int(np.ceil(sr / cfg.f0_min))
    if tau_max >= win // 2:
        raise ValueError("f0_min too low for the analysis window")
    width = win - tau_max

    # d(tau) = e(0) + e(tau) - 2 r(tau), with r computed by FFT correlation
    n_fft = 1 << int(np.ceil(np.log2(win + width)))
    spec_full = np.fft.rfft(frames, n=n_fft, axis=1)
    spec_head = np.fft.rfft(frames[:, :width], n=n_fft, axis=1)
    corr = np.fft.irfft(spec_full * np.conj(spec_head), n=n_fft, axis=1)[:, : tau_max + 1]
    csum = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    lags = np.arange(tau_max + 1)
    energy_lag = csum[:, lags + width] - csum[:, lags]
    diff = np.maximum(energy_lag[:, :1] + energy_lag - 2.0 * corr, 0.0)

    running = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(running > 0, diff[:, 1:] * lags[1:] / running, 1.0)

    rms = np.sqrt(np.mean(frames**2, axis=1))
    f0 = np.zeros(n_frames)
    search = cmnd[:, tau_min : tau_max + 1]
    below = search < cfg.yin_threshold
    for t in np.flatnonzero(below.any(axis=1) & (rms > cfg.voicing_rms)):
        tau = tau_min + int(np.argmax(below[t]))
        while tau + 1 <= tau_max and cmnd[t, tau + 1] < cmnd[t, tau]:
            tau += 1
        shift = 0.0
        if tau_min < tau < tau_max:
            a, b, c = cmnd[t, tau - 1], cmnd[t, tau], cmnd[t, tau + 1]
            denom = a - 2 * b + c
            if denom > 0:
                shift = 0.5 * (a - c) / denom
        f0[t] = np.clip(sr / (tau + shift), cfg.f0_min, cfg.f0_max)
    return f0


def extract_features(audio: np.ndarray, sample_rate: int, cfg: FeatureConfig | None = None) -> AcousticFeatures:
    """Mel, F0 and energy for a mono clip; every output has ``T`` frames."""
    cfg = cfg or FeatureConfig()
    if sample_rate != cfg.sample_rate:
        raise SampleRateMismatch(f"expected {cfg.sample_rate} Hz audio, got {sample_rate} Hz (resample first)")
    audio = np.asarray(audio)
    if audio.ndim != 1:
        raise ValueError("audio must be mono")
    if len(audio) < cfg.win_length:
        raise EmptyAudio(f"{len(audio)} samples is shorter than one {cfg.win_length}-sample window")
    audio = audio.astype(np.float64)
    mag = magnitude_spectrogram(audio, cfg)
    return AcousticFeatures(
        mel=log_mel(mag, cfg).astype(np.float32),
        f0=yin_f0(audio, cfg).astype(np.float32),
        energy=frame_energy(mag).astype(np.float32),
    )


def write_feature_cache(path: str | Path, feats: AcousticFeatures) -> None:
    mel = np.ascontiguousarray(feats.mel, dtype="<f4")
    n_frames, n_mels = mel.shape
    if feats.f0.shape != (n_frames,) or feats.energy.shape != (n_frames,):
        raise FeatureCacheError("f0/energy length must equal mel rows")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, n_frames, n_mels))
        fh.write(mel.tobytes())
        fh.write(np.asarray(feats.f0, dtype="<f4").tobytes())
        fh.write(np.asarray(feats.energy, dtype="<f4").tobytes())


def read_feature_cache(path: str | Path) -> AcousticFeatures:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FeatureCacheError(f"{path}: truncated header")
    magic, version, n_frames, n_mels = _HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC:
        raise FeatureCacheError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise FeatureCacheError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n_frames * (n_mels + 2)
    if len(blob) != expected:
        raise FeatureCacheError(f"{path}: expected {expected} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    mel = data[: n_frames * n_mels].reshape(n_frames, n_mels)
    f0 = data[n_frames * n_mels : n_frames * (n_mels + 1)]
    energy = data[n_frames * (n_mels + 1) :]
    return AcousticFeatures(mel=mel.astype(np.float32), f0=f0.astype(np.float32), energy=energy.astype(np.float32))


def interpolate_unvoiced(f0: np.ndarray) -> np.ndarray:
    """Continuous F0: unvoiced gaps linearly bridged, edges held."""
    f0 = np.asarray(f0, dtype=np.float64)
    voiced = np.flatnonzero(f0 > 0)
    if voiced.size == 0:
        return np.zeros_like(f0)
    return np.interp(np.arange(len(f0)), voiced, f0[voiced])


def phoneme_average(values: np.ndarray, durations) -> np.ndarray:
    """Mean of frame values over each phoneme's span (0 for zero-length phonemes)."""
    durations = np.asarray(durations, dtype=np.int64)
    out = np.zeros(len(durations))
    ends = np.cumsum(durations)
    starts = ends - durations
    for i, (s, e) in enumerate(zip(starts, ends)):
        if e > s:
            out[i] = float(np.mean(values[s:e]))
    return out
