"""Corpus ingestion: manifest records, context windows and data preparation.

A corpus directory holds ``utterances.jsonl`` (one object per line with
``id``, ``text``, ``audio``, ``speaker_id`` and optional ``document``,
``phonemes``, ``split``, ``label``) plus an optional ``alignments.json``
mapping utterance ids to per-phoneme frame counts.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.io import wavfile

from .config import FeatureConfig
from .errors import AlignmentMismatch, PhonemizeError, UnknownUtterance
from .features import (
    AcousticFeatures,
    extract_features,
    interpolate_unvoiced,
    read_feature_cache,
    write_feature_cache,
)

logger = logging.getLogger(__name__)

NULL_CONTEXT = "<null>"
WORD_BOUNDARY = "_"


@dataclass
class UtteranceRecord:
    id: str
    text: str
    phonemes: list
    durations: list
    context_ids: list
    speaker_id: str
    audio_path: str
    split: str = "train"
    label: Optional[str] = None
    document: Optional[str] = None

    def __post_init__(self):
        if len(self.durations) != len(self.phonemes):
            raise ValueError(f"{self.id}: {len(self.durations)} durations for {len(self.phonemes)} phonemes")
        if len(self.context_ids) % 2 != 1:
            raise ValueError(f"{self.id}: context_ids must have odd length")
        if self.context_ids[len(self.context_ids) // 2] != self.id:
            raise ValueError(f"{self.id}: centre of context_ids must be the record itself")

    @property
    def n_frames(self) -> int:
        return int(sum(self.durations))

    @classmethod
    def from_json(cls, obj: dict) -> "UtteranceRecord":
        return cls(
            id=obj["id"],
            text=obj["text"],
            phonemes=list(obj["phonemes"]),
            durations=[int(d) for d in obj["durations"]],
            context_ids=list(obj["context_ids"]),
            speaker_id=obj["speaker_id"],
            audio_path=obj["audio_path"],
            split=obj.get("split", "train"),
            label=obj.get("label"),
            document=obj.get("document"),
        )


@dataclass
class Manifest:
    records: list
    speakers: list = field(default_factory=list)
    phoneme_inventory: list = field(default_factory=list)
    root: Optional[Path] = None

    def __post_init__(self):
        if not self.speakers:
            self.speakers = sorted({r.speaker_id for r in self.records})
        if not self.phoneme_inventory:
            self.phoneme_inventory = sorted({p for r in self.records for p in r.phonemes})
        self._by_id = {r.id: r for r in self.records}
        if len(self._by_id) != len(self.records):
            raise ValueError("duplicate utterance ids in manifest")
        for rec in self.records:
            for cid in rec.context_ids:
                if cid != NULL_CONTEXT and cid not in self._by_id:
                    raise ValueError(f"{rec.id}: context id {cid!r} resolves to nothing")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, utt_id: str) -> UtteranceRecord:
        try:
            return self._by_id[utt_id]
        except KeyError:
            raise UnknownUtterance(utt_id) from None

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._by_id

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def speaker_index(self, speaker_id: str) -> int:
        return self.speakers.index(speaker_id)

    def phoneme_ids(self, phonemes: Sequence[str]) -> list:
        # 0 is reserved for padding
        lookup = {p: i + 1 for i, p in enumerate(self.phoneme_inventory)}
        return [lookup[p] for p in phonemes]

    def feature_path(self, utt_id: str) -> Path:
        if self.root is None:
            raise ValueError("manifest has no root directory; load it from disk")
        return self.root / "features" / f"{utt_id}.styb"

    def features(self, utt_id: str) -> AcousticFeatures:
        return read_feature_cache(self.feature_path(utt_id))

    def stats(self) -> "NormStats":
        return NormStats.load(self.root / "stats.json")

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(asdict(rec), ensure_ascii=False) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "Manifest":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            records = [UtteranceRecord.from_json(json.loads(line)) for line in fh if line.strip()]
        return cls(records, root=path.parent)


def _neighbour(manifest: Manifest, rec: UtteranceRecord, step: int) -> Optional[UtteranceRecord]:
    centre = len(rec.context_ids) // 2
    if centre == 0:
        return None
    cid = rec.context_ids[centre + step]
    return None if cid == NULL_CONTEXT else manifest[cid]


def build_context_window(manifest: Manifest, utt_id: str, k: int) -> list:
    """Texts of the ``2k+1`` utterances centred on ``utt_id``; "" past the document edge.

    Neighbours are followed through the stored ``context_ids`` links, so any
    ``k`` works regardless of the window width used at preparation time.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    rec = manifest[utt_id]
    window = [rec.text]
    for step, insert in ((-1, lambda t: window.insert(0, t)), (1, window.append)):
        cur = rec
        for _ in range(k):
            cur = _neighbour(manifest, cur, step) if cur is not None else None
            insert(cur.text if cur is not None else "")
    return window


def window_from_sequence(texts: Sequence[str], index: int, k: int) -> list:
    """Context window over an in-memory list of sentences (same edge rule)."""
    return [texts[j] if 0 <= j < len(texts) else "" for j in range(index - k, index + k + 1)]


def context_ids_for(ids: Sequence[str], k: int) -> list:
    return [[ids[j] if 0 <= j < len(ids) else NULL_CONTEXT for j in range(i - k, i + k + 1)] for i in range(len(ids))]


def align_durations(durations: Sequence[int], n_frames: int, tolerance: int = 3) -> list:
    """Reconcile aligner durations with the feature frame count.

    The difference is absorbed by the last nonzero entry (spilling backwards if
    a shortfall would drive it negative).
    """
    durations = [int(d) for d in durations]
    if any(d < 0 for d in durations):
        raise AlignmentMismatch("negative duration")
    if not durations:
        raise AlignmentMismatch("no durations")
    diff = n_frames - sum(durations)
    if abs(diff) > tolerance:
        raise AlignmentMismatch(f"durations sum to {sum(durations)} but features have {n_frames} frames")
    out = list(durations)
    if diff > 0:
        nonzero = [i for i, d in enumerate(out) if d > 0]
        out[nonzero[-1] if nonzero else len(out) - 1] += diff
    else:
        need = -diff
        for i in range(len(out) - 1, -1, -1):
            take = min(out[i], need)
            out[i] -= take
            need -= take
            if need == 0:
                break
    return out


def uniform_durations(n_phonemes: int, n_frames: int) -> list:
    """Split ``n_frames`` as evenly as possible; the remainder goes to the leading phonemes."""
    base, rem = divmod(n_frames, n_phonemes)
    return [base + (1 if i < rem else 0) for i in range(n_phonemes)]


class GraphemePhonemizer:
    """Letters as phoneme symbols, with a boundary symbol between words."""

    _split = re.compile(r"[\s\-.,;:!?\"'()]+")

    def __init__(self, boundary: str = WORD_BOUNDARY):
        self.boundary = boundary

    def __call__(self, text: str) -> list:
        words = [w for w in self._split.split(text.lower()) if w]
        phonemes = []
        for word in words:
            bad = [c for c in word if not ("a" <= c <= "z")]
            if bad:
                raise PhonemizeError(f"cannot phonemize {''.join(bad)!r} in {text!r}")
            if phonemes:
                phonemes.append(self.boundary)
            phonemes.extend(word)
        if not phonemes:
            raise PhonemizeError(f"no pronounceable content in {text!r}")
        return phonemes


class LexiconPhonemizer:
    """Word → phoneme-list dictionary lookup."""

    def __init__(self, lexicon: dict, boundary: Optional[str] = WORD_BOUNDARY):
        self.lexicon = {k.lower(): list(v) for k, v in lexicon.items()}
        self.boundary = boundary

    def __call__(self, text: str) -> list:
        phonemes = []
        for word in GraphemePhonemizer._split.split(text.lower()):
            if not word:
                continue
            if word not in self.lexicon:
                raise PhonemizeError(f"{word!r} not in pronunciation lexicon")
            if phonemes and self.boundary:
                phonemes.append(self.boundary)
            phonemes.extend(self.lexicon[word])
        if not phonemes:
            raise PhonemizeError(f"no pronounceable content in {text!r}")
        return phonemes


@dataclass
class NormStats:
    """z-score statistics for F0 (voiced frames, Hz), energy and mel bins."""

    f0_mean: float
    f0_std: float
    energy_mean: float
    energy_std: float
    mel_mean: list
    mel_std: list
    speakers: dict = field(default_factory=dict)
    scope: str = "global"

    def _pick(self, speaker: Optional[str]) -> tuple:
        if self.scope == "speaker" and speaker is not None and speaker in self.speakers:
            s = self.speakers[speaker]
            return s["f0_mean"], s["f0_std"], s["energy_mean"], s["energy_std"]
        return self.f0_mean, self.f0_std, self.energy_mean, self.energy_std

    def norm_f0(self, f0: np.ndarray, speaker: Optional[str] = None) -> np.ndarray:
        """Continuous (gap-bridged) F0 as z-scores."""
        mean, std, _, _ = self._pick(speaker)
        cont = interpolate_unvoiced(f0)
        if not np.any(np.asarray(f0) > 0):
            cont = np.full(len(cont), mean)
        return (cont - mean) / std

    def denorm_f0(self, z: np.ndarray, speaker: Optional[str] = None) -> np.ndarray:
        mean, std, _, _ = self._pick(speaker)
        return np.clip(np.asarray(z) * std + mean, 0.0, None)

    def norm_energy(self, energy: np.ndarray, speaker: Optional[str] = None) -> np.ndarray:
        _, _, mean, std = self._pick(speaker)
        return (np.asarray(energy, dtype=np.float64) - mean) / std

    def denorm_energy(self, z: np.ndarray, speaker: Optional[str] = None) -> np.ndarray:
        _, _, mean, std = self._pick(speaker)
        return np.clip(np.asarray(z) * std + mean, 0.0, None)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "NormStats":
        return cls(**obj)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        return cls.from_json(json.loads(Path(path).read_text()))


def _moments(chunks: list, floor: float = 1e-3) -> tuple:
    values = np.concatenate(chunks) if chunks else np.zeros(1)
    return float(values.mean()), float(max(values.std(), floor))


def compute_stats(manifest: Manifest, scope: str = "global") -> NormStats:
    records = manifest.split("train") or manifest.records
    f0s, energies, mels = [], [], []
    per_spk: dict = {}
    for rec in records:
        feats = manifest.features(rec.id)
        voiced = feats.f0[feats.f0 > 0].astype(np.float64)
        f0s.append(voiced)
        energies.append(feats.energy.astype(np.float64))
        mels.append(feats.mel.astype(np.float64))
        bucket = per_spk.setdefault(rec.speaker_id, ([], []))
        bucket[0].append(voiced)
        bucket[1].append(feats.energy.astype(np.float64))
    f0_mean, f0_std = _moments(f0s)
    e_mean, e_std = _moments(energies)
    mel = np.concatenate(mels)
    speakers = {}
    for spk, (f, e) in sorted(per_spk.items()):
        fm, fs = _moments(f)
        em, es = _moments(e)
        speakers[spk] = {"f0_mean": fm, "f0_std": fs, "energy_mean": em, "energy_std": es}
    return NormStats(
        f0_mean=f0_mean,
        f0_std=f0_std,
        energy_mean=e_mean,
        energy_std=e_std,
        mel_mean=mel.mean(axis=0).tolist(),
        mel_std=np.maximum(mel.std(axis=0), 1e-3).tolist(),
        speakers=speakers,
        scope=scope,
    )


def read_wav(path: str | Path) -> tuple:
    """Return (float samples in [-1, 1], sample rate)."""
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, found {data.shape[1]} channels")
    if data.dtype == np.int16:
        audio = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        audio = data.astype(np.float64) / 2147483648.0
    else:
        audio = data.astype(np.float64)
    return audio, sr


def write_wav(path: str | Path, audio: np.ndarray, sample_rate: int) -> None:
    """16-bit PCM mono."""
    pcm = np.clip(np.round(np.asarray(audio) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)


def _load_corpus(corpus_dir: Path) -> tuple:
    entries = []
    with open(corpus_dir / "utterances.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                entries.append(json.loads(line))
    align_path = corpus_dir / "alignments.json"
    alignments = json.loads(align_path.read_text()) if align_path.exists() else {}
    return entries, alignments


def _extract_one(job: tuple) -> tuple:
    utt_id, audio_path, out_path, cfg = job
    audio, sr = read_wav(audio_path)
    feats = extract_features(audio, sr, cfg)
    write_feature_cache(out_path, feats)
    return utt_id, feats.n_frames


def prepare_data(
    corpus_dir: str | Path,
    out_dir: str | Path,
    cfg: Optional[FeatureConfig] = None,
    phonemizer=None,
    workers: int = 1,
) -> Manifest:
    """Extract features for every utterance and write ``manifest.jsonl`` + ``stats.json``."""
    cfg = cfg or FeatureConfig()
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    phonemizer = phonemizer or GraphemePhonemizer()
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    entries, alignments = _load_corpus(corpus_dir)

    jobs = [
        (e["id"], str((corpus_dir / e["audio"]).resolve()), str(out_dir / "features" / f"{e['id']}.styb"), cfg)
        for e in entries
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            frames = dict(pool.map(_extract_one, jobs))
    else:
        frames = dict(map(_extract_one, jobs))

    documents: dict = {}
    for e in entries:
        documents.setdefault(e.get("document", e["id"]), []).append(e["id"])
    ctx = {}
    for ids in documents.values():
        for utt_id, window in zip(ids, context_ids_for(ids, cfg.context_k)):
            ctx[utt_id] = window

    records = []
    n_fallback = 0
    for e, job in zip(entries, jobs):
        phonemes = list(e["phonemes"]) if e.get("phonemes") else phonemizer(e["text"])
        n_frames = frames[e["id"]]
        if e["id"] in alignments:
            durations = align_durations(alignments[e["id"]], n_frames, cfg.duration_tolerance)
        else:
            n_fallback += 1
            durations = uniform_durations(len(phonemes), n_frames)
        records.append(
            UtteranceRecord(
                id=e["id"],
                text=e["text"],
                phonemes=phonemes,
                durations=durations,
                context_ids=ctx[e["id"]],
                speaker_id=str(e["speaker_id"]),
                audio_path=job[1],
                split=e.get("split", "train"),
                label=e.get("label"),
                document=e.get("document"),
            )
        )
    if n_fallback:
        logger.warning("%d utterances had no alignment; used uniform durations", n_fallback)
    manifest = Manifest(records, root=out_dir)
    manifest.write(out_dir / "manifest.jsonl")
    compute_stats(manifest, cfg.norm_scope).save(out_dir / "stats.json")
    return Manifest.read(out_dir / "manifest.jsonl")


def iter_texts(path: str | Path) -> Iterable[str]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield line
