"""Objective metrics and style-embedding export.

F0 RMSE runs over frames voiced in both sequences, energy RMSE over all
frames, duration MSE in seconds per phoneme.  MCD uses DCT cepstra of the
log-mel (orders 1..13, c0 dropped) aligned by dynamic time warping.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Optional

import librosa
import numpy as np
from scipy.fft import dct
from sklearn.manifold import TSNE

from .config import FeatureConfig
from .corpus import Manifest
from .errors import NoVoicedOverlap, ShapeMismatch
from .features import read_feature_cache
from .vqvae import utterance_embeddings

logger = logging.getLogger(__name__)

MCD_CONST = 10.0 / math.log(10.0) * math.sqrt(2.0)
REPORT_COLUMNS = ("id", "f0_rmse", "energy_rmse", "duration_mse", "mcd")


def _pair(pred, ref) -> tuple:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs reference {ref.shape}")
    return pred, ref


def f0_rmse(pred_f0, ref_f0) -> float:
    pred, ref = _pair(pred_f0, ref_f0)
    both = (pred > 0) & (ref > 0)
    if not both.any():
        raise NoVoicedOverlap("no frame is voiced in both sequences")
    return float(np.sqrt(np.mean((pred[both] - ref[both]) ** 2)))


def energy_rmse(pred, ref) -> float:
    pred, ref = _pair(pred, ref)
    if pred.size == 0:
        raise ShapeMismatch("empty energy sequences")
    return float(np.sqrt(np.mean((pred - ref) ** 2)))


def duration_mse(pred_dur, ref_dur) -> float:
    """Mean squared error of per-phoneme durations given in seconds."""
    pred, ref = _pair(pred_dur, ref_dur)
    if pred.size == 0:
        raise ShapeMismatch("no phonemes")
    return float(np.mean((pred - ref) ** 2))


def frames_to_seconds(frames, cfg: Optional[FeatureConfig] = None) -> np.ndarray:
    cfg = cfg or FeatureConfig()
    return np.asarray(frames, dtype=np.float64) * cfg.hop_length / cfg.sample_rate


def mel_cepstrum(mel, order: int = 13) -> np.ndarray:
    """(T, n_mels) log-mel -> (T, order) cepstra c1..c_order."""
    return dct(np.asarray(mel, dtype=np.float64), type=2, norm="ortho", axis=1)[:, 1 : order + 1]


def mcd(pred_cep, ref_cep) -> float:
    """Mel cepstral distortion in dB over the DTW alignment of two cepstral sequences."""
    a = np.atleast_2d(np.asarray(pred_cep, dtype=np.float64))
    b = np.atleast_2d(np.asarray(ref_cep, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ShapeMismatch("empty cepstral sequence")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"cepstral orders differ: {a.shape[1]} vs {b.shape[1]}")
    _, path = librosa.sequence.dtw(X=a.T, Y=b.T, metric="euclidean")
    dist = np.linalg.norm(a[path[:, 0]] - b[path[:, 1]], axis=1)
    return float(MCD_CONST * dist.mean())


def _row_metrics(pred_dir: Path, rec, ref, cfg: FeatureConfig) -> dict:
    tf = read_feature_cache(pred_dir / f"{rec.id}.tf.styb")
    free = read_feature_cache(pred_dir / f"{rec.id}.free.styb")
    frames = json.loads((pred_dir / f"{rec.id}.durations.json").read_text())["frames"]
    try:
        f0 = f0_rmse(tf.f0, ref.f0)
    except NoVoicedOverlap:
        logger.warning("%s: no voiced overlap, f0_rmse undefined", rec.id)
        f0 = float("nan")
    return {
        "id": rec.id,
        "f0_rmse": f0,
        "energy_rmse": energy_rmse(tf.energy, ref.energy),
        "duration_mse": duration_mse(frames_to_seconds(frames, cfg), frames_to_seconds(rec.durations, cfg)),
        "mcd": mcd(mel_cepstrum(free.mel), mel_cepstrum(ref.mel)),
    }


def evaluate(pred_dir: str | Path, manifest: Manifest, out_csv: str | Path, split: str = "test", cfg: Optional[FeatureConfig] = None) -> list:
    """One row per utterance plus a ``mean`` row.

    F0/energy compare the teacher-forced prediction (frame-aligned with the
    reference); duration MSE and MCD use the free-running one.
    """
    cfg = cfg or FeatureConfig()
    pred_dir = Path(pred_dir)
    records = manifest.split(split) if split else list(manifest.records)
    rows = [_row_metrics(pred_dir, rec, manifest.features(rec.id), cfg) for rec in records]
    if rows:
        mean = {"id": "mean"}
        for col in REPORT_COLUMNS[1:]:
            vals = np.array([r[col] for r in rows], dtype=np.float64)
            mean[col] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
        rows.append(mean)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
    return rows


def separability(embeddings: np.ndarray, labels) -> tuple:
    """(mean intra-class, mean inter-class) Euclidean distance over distinct pairs."""
    e = np.asarray(embeddings, dtype=np.float64)
    lab = np.asarray(labels)
    d = np.linalg.norm(e[:, None] - e[None], axis=-1)
    same = lab[:, None] == lab[None]
    off = ~np.eye(len(lab), dtype=bool)
    return float(d[same & off].mean()), float(d[~same].mean())


def tsne_projection(embeddings: np.ndarray, seed: int = 0) -> np.ndarray:
    n = len(embeddings)
    if n < 3:
        return np.zeros((n, 2))
    return TSNE(n_components=2, perplexity=min(30.0, (n - 1) / 3.0), init="pca", random_state=seed).fit_transform(
        np.asarray(embeddings, dtype=np.float64)
    )


def export_style_embeddings(
    extractor, manifest: Manifest, text_model, out_dir: str | Path, labels: Optional[dict] = None, seed: int = 0
) -> dict:
    """Write ``embeddings.csv`` (id, label, D floats), ``tsne.csv`` and ``tsne.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids, manifest_labels, emb = utterance_embeddings(extractor, manifest, text_model)
    labels = labels or {}
    labs = [labels.get(i, lab) or "" for i, lab in zip(ids, manifest_labels)]
    with open(out_dir / "embeddings.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"e{j}" for j in range(emb.shape[1])])
        for i, lab, row in zip(ids, labs, emb):
            writer.writerow([i, lab] + [f"{v:.9g}" for v in row])
    coords = tsne_projection(emb, seed)
    with open(out_dir / "tsne.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "x", "y"])
        for i, lab, (x, y) in zip(ids, labs, coords):
            writer.writerow([i, lab, f"{x:.9g}", f"{y:.9g}"])
    _scatter(coords, labs, out_dir / "tsne.png")
    result = {"ids": ids, "labels": labs, "embeddings": emb, "coords": coords}
    if len(set(labs)) > 1 and all(labs):
        result["intra"], result["inter"] = separability(emb, labs)
    return result


def _scatter(coords: np.ndarray, labels: list, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    names = sorted(set(labels))
    for name in names:
        pts = coords[[lab == name for lab in labels]]
        ax.scatter(pts[:, 0], pts[:, 1], s=14, label=name or "unlabelled")
    if len(names) > 1:
        ax.legend(fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
