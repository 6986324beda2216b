"""Text + context -> mel -> waveform.

The vocoder is Griffin-Lim over the pseudo-inverse of the mel filterbank.  An
external command can replace it: it receives the predicted mel cache path
and the target wav path.
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import librosa
import numpy as np
import torch

from .config import FeatureConfig, from_dict
from .corpus import GraphemePhonemizer, build_context_window, NormStats, read_wav, window_from_sequence, write_wav
from .errors import PhonemizeError
from .features import AcousticFeatures, extract_features, mel_basis, write_feature_cache
from .acoustic import forward_infer
from .text_style import encode_context, load_text_style
from .training import load_acoustic

logger = logging.getLogger(__name__)

TEXT_CKPT = "text_style.safetensors"
ACOUSTIC_CKPT = "acoustic.safetensors"


def griffin_lim(mel: np.ndarray, cfg: FeatureConfig, n_iter: int = 60, momentum: float = 0.99, seed: int = 0) -> np.ndarray:
    """Log-mel (T, n_mels) -> waveform of ``num_samples(T)`` samples."""
    inv = np.linalg.pinv(mel_basis(cfg))
    magnitude = np.maximum(inv @ np.exp(np.asarray(mel, dtype=np.float64).T), 0.0)
    audio = librosa.griffinlim(
        magnitude,
        n_iter=n_iter,
        hop_length=cfg.hop_length,
        win_length=cfg.win_length,
        n_fft=cfg.n_fft,
        window="hann",
        center=False,
        momentum=momentum,
        random_state=seed,
    )
    return audio.astype(np.float32)


def roundtrip_correlation(mel: np.ndarray, cfg: FeatureConfig, seed: int = 0) -> np.ndarray:
    """Per-bin Pearson correlation between ``mel`` and the mel re-extracted from its Griffin-Lim audio."""
    audio = griffin_lim(mel, cfg, seed=seed)
    again = extract_features(audio, cfg.sample_rate, cfg).mel
    t = min(len(again), len(mel))
    a, b = np.asarray(mel[:t], dtype=np.float64), again[:t].astype(np.float64)
    a = a - a.mean(0)
    b = b - b.mean(0)
    return (a * b).sum(0) / np.sqrt((a * a).sum(0) * (b * b).sum(0)).clip(1e-12)


@dataclass
class Synthesizer:
    """Frozen text encoder + acoustic model.  The style extractor is never loaded."""

    text_model: object
    acoustic: object
    extra: dict
    phonemizer: object = None
    vocoder_cmd: Optional[str] = None
    seed: int = 0

    @classmethod
    def load(cls, ckpt_dir: str | Path, phonemizer=None, vocoder_cmd: Optional[str] = None, seed: int = 0) -> "Synthesizer":
        ckpt_dir = Path(ckpt_dir)
        text_model = load_text_style(ckpt_dir / TEXT_CKPT)
        acoustic, extra = load_acoustic(ckpt_dir / ACOUSTIC_CKPT)
        return cls(text_model, acoustic, extra, phonemizer or GraphemePhonemizer(), vocoder_cmd, seed)

    @property
    def feature_cfg(self) -> FeatureConfig:
        return from_dict(FeatureConfig, self.extra["features"])

    @property
    def k(self) -> int:
        return int(self.extra["context_k"])

    def phoneme_ids(self, text: str) -> list:
        return _ids_for(self, self.phonemizer(text))

    def window(self, text: str, context: Optional[dict | Sequence[str]] = None) -> list:
        """Context window centred on ``text``; missing neighbours become null slots."""
        if context is None:
            past, future = [], []
        elif isinstance(context, dict):
            past, future = list(context.get("past", [])), list(context.get("future", []))
        else:
            # a bare list is the past, oldest first
            past, future = list(context), []
        past = ([""] * self.k + past)[len(past) :] if self.k else []
        future = (future + [""] * self.k)[: self.k]
        return past + [text] + future

    def predict(self, text: str, context=None, window: Optional[list] = None, phoneme_ids=None) -> dict:
        """Free-running prediction; returns mel (log scale), f0, energy and durations."""
        torch.manual_seed(self.seed)
        window = window if window is not None else self.window(text, context)
        ids = phoneme_ids if phoneme_ids is not None else self.phoneme_ids(text)
        out = forward_infer(self.acoustic, ids, window, self.text_model)
        return self._unpack(out)

    def predict_forced(self, phoneme_ids: Sequence[int], window: list, durations: Sequence[int]) -> dict:
        """Prediction with ground-truth durations, so frames line up with a reference."""
        with torch.no_grad():
            h_cs = encode_context(self.text_model, window)
            ids = torch.as_tensor(list(phoneme_ids), dtype=torch.long)[None]
            d = torch.as_tensor(list(durations), dtype=torch.long)[None]
            model = self.acoustic.eval()
            h_s = h_cs[len(window) // 2][None]
            # durations are forced; pitch/energy still come from the predictors
            probe = model(ids, h_s, h_cs[None])
            out = model(ids, h_s, h_cs[None], targets={"durations": d, "pitch": probe.pitch_pred, "energy": probe.energy_pred})
        return self._unpack(out)

    def _unpack(self, out) -> dict:
        stats = NormStats.from_json(self.extra["stats"])
        mel = self.acoustic.denormalize_mel(out.mel[0]).numpy()
        durations = out.durations[0].numpy()
        f0 = np.repeat(stats.denorm_f0(out.pitch_pred[0].numpy()), durations)
        energy = np.repeat(stats.denorm_energy(out.energy_pred[0].numpy()), durations)
        return {"mel": mel.astype(np.float32), "f0": f0.astype(np.float32), "energy": energy.astype(np.float32), "durations": durations.tolist()}

    def vocode(self, mel: np.ndarray, wav_path: Path, mel_path: Path) -> None:
        if self.vocoder_cmd:
            cmd = shlex.split(self.vocoder_cmd) + [str(mel_path), str(wav_path)]
            subprocess.run(cmd, check=True)
            return
        write_wav(wav_path, griffin_lim(mel, self.feature_cfg, seed=self.seed), self.feature_cfg.sample_rate)

    def synthesize(self, text: str, context=None, out_path: str | Path = "out.wav", window: Optional[list] = None) -> Path:
        """Write ``out_path`` (16-bit PCM) plus the predicted mel as ``<stem>.styb`` next to it."""
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        pred = self.predict(text, context, window)
        mel_path = out_path.with_suffix(".styb")
        write_feature_cache(mel_path, AcousticFeatures(pred["mel"], pred["f0"], pred["energy"]))
        self.vocode(pred["mel"], out_path, mel_path)
        return out_path

    def synthesize_paragraph(self, sentences: Sequence[str], out_dir: str | Path, concatenate: bool = True) -> list:
        """One wav per sentence (0001.wav, ...) with sliding context windows."""
        sentences = [s for s in (s.strip() for s in sentences) if s]
        if not sentences:
            raise ValueError("paragraph has no sentences")
        out_dir = Path(out_dir)
        paths = []
        for i, text in enumerate(sentences):
            window = window_from_sequence(sentences, i, self.k)
            paths.append(self.synthesize(text, out_path=out_dir / f"{i + 1:04d}.wav", window=window))
        if concatenate:
            audio = np.concatenate([read_wav(p)[0] for p in paths])
            write_wav(out_dir / "paragraph.wav", audio, self.feature_cfg.sample_rate)
        return paths


def synthesize(text: str, context, ckpt_dir: str | Path, out_path: str | Path, **kwargs) -> Path:
    return Synthesizer.load(ckpt_dir, **kwargs).synthesize(text, context, out_path)


def synthesize_paragraph(sentences: Sequence[str], ckpt_dir: str | Path, out_dir: str | Path, **kwargs) -> list:
    return Synthesizer.load(ckpt_dir, **kwargs).synthesize_paragraph(sentences, out_dir)


def predict_manifest(synth: Synthesizer, manifest, out_dir: str | Path, split: str = "test") -> list:
    """Per utterance: ``<id>.tf.styb`` (reference durations), ``<id>.free.styb`` and ``<id>.durations.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = manifest.split(split) if split else list(manifest.records)
    ids = []
    for rec in records:
        window = build_context_window(manifest, rec.id, synth.k)
        ph = _ids_for(synth, rec.phonemes)
        forced = synth.predict_forced(ph, window, rec.durations)
        free = synth.predict(rec.text, window=window, phoneme_ids=ph)
        write_feature_cache(out_dir / f"{rec.id}.tf.styb", AcousticFeatures(forced["mel"], forced["f0"], forced["energy"]))
        write_feature_cache(out_dir / f"{rec.id}.free.styb", AcousticFeatures(free["mel"], free["f0"], free["energy"]))
        (out_dir / f"{rec.id}.durations.json").write_text(json.dumps({"id": rec.id, "frames": free["durations"]}))
        ids.append(rec.id)
    return ids


def _ids_for(synth: Synthesizer, phonemes: Sequence[str]) -> list:
    lookup = {p: i + 1 for i, p in enumerate(synth.extra["phoneme_inventory"])}
    missing = sorted({p for p in phonemes if p not in lookup})
    if missing:
        raise PhonemizeError(f"symbols {missing} are not in the model's phoneme inventory")
    return [lookup[p] for p in phonemes]
