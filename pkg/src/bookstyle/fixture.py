"""Deterministic synthetic corpus for smoke training and tests.

Speech is imitated by letter-wise source-filter synthesis: every grapheme gets
a two-formant envelope, vowels and voiced consonants a harmonic source and
the rest shaped noise.  Utterances come in two prosody regimes (``calm``: low,
falling, quiet and slow; ``lively``: high, modulated, loud and fast) so style
separability can be measured, and alignments are exact by construction.
"""

from __future__ import annotations

import json
import string
from pathlib import Path

import numpy as np

from .config import FeatureConfig
from .corpus import GraphemePhonemizer, write_wav
from .features import num_samples

EMOTION_GROUPS = {
    "sad_verb": ["cried", "wept", "sobbed"],
    "sad_adv": ["sadly", "gloomily", "sorrowfully"],
    "calm_verb": ["sighed", "whispered", "murmured"],
    "calm_adv": ["softly", "quietly", "gently"],
    "happy_verb": ["laughed", "giggled", "chuckled"],
    "happy_adv": ["happily", "cheerfully", "merrily"],
    "angry_verb": ["shouted", "yelled", "roared"],
    "angry_adv": ["angrily", "furiously", "fiercely"],
}
REGIME_WORDS = {
    "calm": (("sad_verb", "calm_verb"), ("sad_adv", "calm_adv")),
    "lively": (("happy_verb", "angry_verb"), ("happy_adv", "angry_adv")),
}
NAMES = ["tom", "ann", "bob", "eve", "max", "liz", "sam", "kim"]
NOUNS = ["dog", "girl", "king", "crowd", "boy", "queen", "cat", "man"]
NEUTRAL = [
    "the train left the station at noon",
    "the book was on the table",
    "he walked to the market",
    "the road ran along the river",
    "she opened the window",
    "they counted the boxes twice",
    "the clock struck nine",
    "we read the letter again",
]

VOWELS = set("aeiouy")
VOICED = set("bdgjlmnrvwz")
REGIMES = {
    "calm": {"f0": (100.0, 120.0), "amp": 0.12, "frames": (4, 6), "mod": 0.0, "slope": -0.15},
    "lively": {"f0": (200.0, 240.0), "amp": 0.45, "frames": (3, 5), "mod": 25.0, "slope": 0.10},
}
SPEAKERS = {"spk_a": 1.0, "spk_b": 1.12}


def emotion_lexicon() -> dict:
    """Closed substitution table: each word maps to the rest of its group."""
    lex = {}
    for words in EMOTION_GROUPS.values():
        for w in words:
            lex[w] = [o for o in words if o != w]
    return lex


def _letter_envelopes(seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    env = {}
    for ch in string.ascii_lowercase:
        env[ch] = (rng.uniform(250, 900), rng.uniform(1000, 2800), rng.uniform(0.2, 0.8))
    return env


def synthesize_utterance(
    phonemes: list, durations: list, regime: str, speaker: str, rng: np.random.Generator, cfg: FeatureConfig
) -> np.ndarray:
    params = REGIMES[regime]
    scale = SPEAKERS[speaker]
    envs = _letter_envelopes()
    sr = cfg.sample_rate
    n_frames = int(sum(durations))
    n = num_samples(n_frames, cfg)
    frame_of_sample = np.clip(np.round((np.arange(n) - cfg.win_length / 2) / cfg.hop_length), 0, n_frames - 1)
    phon_of_frame = np.repeat(np.arange(len(phonemes)), durations)
    phon = phon_of_frame[frame_of_sample.astype(int)]

    # frame-rate pitch contour, interpolated to samples
    base = rng.uniform(*params["f0"])
    pos = np.linspace(0.0, 1.0, n)
    f0 = base * (1.0 + params["slope"] * pos)
    f0 = f0 + params["mod"] * np.sin(2 * np.pi * 3.0 * np.arange(n) / sr + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0) / sr

    voiced_gain = np.array([1.0 if p in VOWELS else 0.4 if p in VOICED else 0.0 for p in phonemes])
    noise_gain = np.array(
        [0.0 if p == "_" else 0.03 if p in VOWELS else 0.1 if p in VOICED else 0.35 for p in phonemes]
    )
    f1 = np.array([envs[p][0] * scale if p in envs else 500.0 for p in phonemes])
    f2 = np.array([envs[p][1] * scale if p in envs else 1500.0 for p in phonemes])
    hi = np.array([envs[p][2] if p in envs else 0.5 for p in phonemes])

    kernel = np.hanning(121)
    kernel /= kernel.sum()

    def smooth(x):
        return np.convolve(x, kernel, mode="same")

    g_voiced = smooth(voiced_gain[phon])
    g_noise = smooth(noise_gain[phon])
    s_f1, s_f2, s_hi = smooth(f1[phon]), smooth(f2[phon]), smooth(hi[phon])

    signal = np.zeros(n)
    n_harm = int(7600 // (f0.max()))
    for h in range(1, n_harm + 1):
        freq = h * f0
        amp = np.exp(-(((freq - s_f1) / 150.0) ** 2)) + 0.6 * np.exp(-(((freq - s_f2) / 250.0) ** 2))
        amp = amp + 0.05 / (1.0 + freq / 500.0)
        signal += amp * np.sin(h * phase)
    signal *= g_voiced

    white = rng.standard_normal(n)
    low = np.convolve(white, np.ones(8) / 8, mode="same")
    high = white - low
    signal += g_noise * ((1 - s_hi) * low * 2.0 + s_hi * high)

    signal *= params["amp"] / max(np.max(np.abs(signal)), 1e-9)
    return signal


def _sentence(rng: np.random.Generator, regime: str) -> str:
    verbs, advs = REGIME_WORDS[regime]
    verb = rng.choice(EMOTION_GROUPS[verbs[rng.integers(2)]])
    adv = rng.choice(EMOTION_GROUPS[advs[rng.integers(2)]])
    return f"{rng.choice(NAMES)} {verb} {adv}"


def text_corpus(n: int = 200, seed: int = 0) -> list:
    """Toy unlabeled text: mostly emotional templates, some neutral narration."""
    rng = np.random.default_rng(seed)
    groups = list(EMOTION_GROUPS)
    out = []
    for i in range(n):
        r = rng.random()
        if r < 0.15:
            out.append(f"{rng.choice(NAMES)} said that {rng.choice(NEUTRAL)}")
            continue
        verb_group = groups[2 * rng.integers(4)]
        adv_group = groups[2 * rng.integers(4) + 1]
        verb = rng.choice(EMOTION_GROUPS[verb_group])
        adv = rng.choice(EMOTION_GROUPS[adv_group])
        template = rng.integers(3)
        if template == 0:
            out.append(f"{rng.choice(NAMES)} {verb} {adv}")
        elif template == 1:
            out.append(f"the {rng.choice(NOUNS)} {verb} {adv} at {rng.choice(NAMES)}")
        else:
            out.append(f"{rng.choice(NAMES)} {verb} {adv} when the {rng.choice(NOUNS)} came home")
    return out


# desk-scale settings used by the bundled acceptance runs, one file per stage
FIXTURE_COMMON = {
    "batch_size": 16,
    "warmup_steps": 40,
    "seed": 1234,
    "text_layers": 2,
    "text_d_model": 128,
    "text_ff": 256,
    "enc_layers": 2,
    "dec_layers": 2,
    "ffn_filter": 256,
}
FIXTURE_STAGES = {
    "text_style": {"learning_rate": 0.0003, "phase1_epochs": 6, "phase2_epochs": 2},
    "style_extractor": {"learning_rate": 0.001, "epochs": 30},
    "tts": {"learning_rate": 0.001, "epochs": 50},
}


def fixture_config(stage: str) -> dict:
    return {**FIXTURE_COMMON, **FIXTURE_STAGES[stage]}


def make_fixture(out_dir: str | Path, n_utterances: int = 50, n_per_document: int = 5, seed: int = 0) -> Path:
    """Write the synthetic corpus, text corpus, lexicon, labels and config to ``out_dir``."""
    cfg = FeatureConfig()
    out_dir = Path(out_dir)
    corpus = out_dir / "corpus"
    (corpus / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    phonemize = GraphemePhonemizer()

    regimes = ["calm", "lively"] * (n_utterances // 2) + ["calm"] * (n_utterances % 2)
    rng.shuffle(regimes)
    entries, alignments, labels = [], {}, {}
    for i in range(n_utterances):
        doc = i // n_per_document
        speaker = sorted(SPEAKERS)[doc % len(SPEAKERS)]
        regime = regimes[i]
        text = _sentence(rng, regime)
        phonemes = phonemize(text)
        lo, hi = REGIMES[regime]["frames"]
        durations = [2 if p == "_" else int(rng.integers(lo, hi + 1)) for p in phonemes]
        audio = synthesize_utterance(phonemes, durations, regime, speaker, rng, cfg)
        utt_id = f"utt{i:04d}"
        write_wav(corpus / "wav" / f"{utt_id}.wav", audio, cfg.sample_rate)
        split = {8: "val", 9: "test"}.get(i % 10, "train")
        entries.append(
            {
                "id": utt_id,
                "text": text,
                "audio": f"wav/{utt_id}.wav",
                "speaker_id": speaker,
                "document": f"doc{doc:02d}",
                "split": split,
                "label": regime,
            }
        )
        alignments[utt_id] = durations
        labels[utt_id] = regime

    with open(corpus / "utterances.jsonl", "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")
    (corpus / "alignments.json").write_text(json.dumps(alignments))
    (out_dir / "labels.json").write_text(json.dumps(labels, indent=1))
    (out_dir / "lexicon.json").write_text(json.dumps(emotion_lexicon(), indent=1))
    (out_dir / "text_corpus.txt").write_text("\n".join(text_corpus(200, seed)) + "\n")
    paragraph = [_sentence(rng, r) for r in ("calm", "calm", "lively", "lively", "calm")]
    (out_dir / "paragraph.txt").write_text("\n".join(paragraph) + "\n")
    (out_dir / "context.json").write_text(json.dumps({"past": paragraph[:2], "future": paragraph[3:]}))
    for stage in FIXTURE_STAGES:
        lines = [f"{k}: {v}" for k, v in fixture_config(stage).items()]
        (out_dir / f"{stage}.yaml").write_text("\n".join(lines) + "\n")
    return out_dir
