"""Spectrogram style extractor: a conditioned VQ-VAE over the low mel band.

The encoder sees Mel20 plus frame-level F0, energy and the utterance text
style and emits one latent per frame; the latents are snapped to a learned
codebook.  Speaker identity enters the decoder only, so the codes carry
what the speaker id cannot explain.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExtractorConfig, StageConfig, from_dict
from .corpus import Manifest, NormStats
from .errors import EmptyCorpus, ShapeMismatch
from .features import low_band
from .loop import Phase, StageLoop, plot_losses, seed_everything

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "style_extractor"


class _StraightThrough(torch.autograd.Function):
    """Forward returns the codewords exactly; backward hands the gradient to z."""

    @staticmethod
    def forward(ctx, z, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


class Codebook(nn.Module):
    def __init__(self, size: int = 512, dim: int = 256, ema: bool = False, decay: float = 0.99):
        super().__init__()
        self.size, self.dim, self.ema, self.decay = size, dim, ema, decay
        self.weight = nn.Parameter(torch.empty(size, dim).uniform_(-1.0 / size, 1.0 / size), requires_grad=not ema)
        self.register_buffer("usage_counts", torch.zeros(size, dtype=torch.long))
        if ema:
            self.register_buffer("ema_count", torch.ones(size))
            self.register_buffer("ema_sum", self.weight.detach().clone())

    def reset_usage(self) -> None:
        self.usage_counts.zero_()

    def perplexity(self, counts: Optional[torch.Tensor] = None) -> float:
        counts = self.usage_counts if counts is None else counts
        total = counts.sum()
        if total == 0:
            return 0.0
        p = counts.double() / total
        p = p[p > 0]
        return float(torch.exp(-(p * p.log()).sum()))

    @torch.no_grad()
    def ema_update(self, z: torch.Tensor, indices: torch.Tensor) -> None:
        onehot = F.one_hot(indices, self.size).to(z.dtype)
        self.ema_count.mul_(self.decay).add_(onehot.sum(0), alpha=1 - self.decay)
        self.ema_sum.mul_(self.decay).add_(onehot.T @ z, alpha=1 - self.decay)
        n = self.ema_count.sum()
        count = (self.ema_count + 1e-5) / (n + self.size * 1e-5) * n
        self.weight.data.copy_(self.ema_sum / count[:, None])

    @torch.no_grad()
    def restart_dead(self, z: torch.Tensor, generator: torch.Generator) -> int:
        """Re-seed never-used codewords from random encoder outputs."""
        dead = torch.nonzero(self.usage_counts == 0).flatten()
        if dead.numel() == 0 or z.numel() == 0:
            return 0
        pick = torch.randint(0, z.shape[0], (dead.numel(),), generator=generator)
        self.weight.data[dead] = z[pick]
        if self.ema:
            self.ema_sum[dead] = z[pick]
            self.ema_count[dead] = 1.0
        return int(dead.numel())


class Quantized(NamedTuple):
    z_q: torch.Tensor
    indices: torch.Tensor
    codewords: torch.Tensor  # gathered rows, differentiable w.r.t. the codebook


def quantize(codebook: Codebook, z: torch.Tensor) -> Quantized:
    """Nearest codeword per row of ``z`` (..., D); ties go to the lowest index."""
    flat = z.reshape(-1, z.shape[-1])
    # the mm-based distance expansion loses exactness, so compute differences directly
    dist = torch.cdist(flat.detach(), codebook.weight.detach(), compute_mode="donot_use_mm_for_euclid_dist")
    indices = torch.argmin(dist, dim=1)  # first minimum wins
    rows = codebook.weight[indices]
    z_q = _StraightThrough.apply(flat, rows.detach())
    if codebook.training:
        codebook.usage_counts += torch.bincount(indices, minlength=codebook.size)
        if codebook.ema:
            codebook.ema_update(flat.detach(), indices)
    shape = z.shape[:-1]
    return Quantized(z_q.reshape(z.shape), indices.reshape(shape), rows.reshape(z.shape))


class ResBlock2d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.BatchNorm2d(channels),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    # stride 1 on time, 2 on frequency
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=(1, 2), padding=1), nn.BatchNorm2d(c_out), nn.ReLU())


class StyleExtractorModel(nn.Module):
    def __init__(self, cfg: ExtractorConfig, speakers: Sequence[str], stats: Optional[NormStats] = None, n_bins: int = 20):
        super().__init__()
        if n_bins % 4:
            raise ValueError("the low band must divide by 4 (two frequency-stride-2 blocks)")
        self.cfg = cfg
        self.speakers = list(speakers)
        self.n_bins = n_bins
        self.frozen = False
        c1, c2, d = cfg.ext_channels1, cfg.ext_channels2, cfg.d_style
        self.f1, self.f2 = n_bins // 2, n_bins // 4

        self.block1 = _conv_block(1, c1)
        self.f0_proj = nn.Linear(1, d)
        self.energy_proj = nn.Linear(1, d)
        self.text_proj = nn.Linear(d, d)
        self.cond_to_map = nn.Linear(d, c1 * self.f1)
        self.block2 = _conv_block(c1, c2)
        self.enc_res = nn.Sequential(*[ResBlock2d(c2) for _ in range(cfg.n_res_blocks)])
        self.to_latent = nn.Linear(c2 * self.f2, d)
        # keeps latent scale bounded so codewords can follow the encoder
        self.latent_norm = nn.LayerNorm(d, elementwise_affine=False)

        self.codebook = Codebook(cfg.codebook_size, d, cfg.vq_ema, cfg.ema_decay)

        self.from_latent = nn.Linear(d, c2 * self.f2)
        self.speaker_table = nn.Embedding(max(1, len(self.speakers)), cfg.d_speaker)
        self.speaker_proj = nn.Linear(cfg.d_speaker, c2 * self.f2)
        self.dec_res = nn.Sequential(*[ResBlock2d(c2) for _ in range(cfg.n_res_blocks)])
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(c2, c1, (3, 4), stride=(1, 2), padding=(1, 1)), nn.BatchNorm2d(c1), nn.ReLU()
        )
        self.up2 = nn.ConvTranspose2d(c1, 1, (3, 4), stride=(1, 2), padding=(1, 1))

        stats = stats or NormStats(0.0, 1.0, 0.0, 1.0, [0.0] * n_bins, [1.0] * n_bins)
        self.register_buffer("mel_mean", torch.tensor(stats.mel_mean[:n_bins], dtype=torch.float32))
        self.register_buffer("mel_std", torch.tensor(stats.mel_std[:n_bins], dtype=torch.float32))
        self.register_buffer(
            "prosody_stats",
            torch.tensor([stats.f0_mean, stats.f0_std, stats.energy_mean, stats.energy_std], dtype=torch.float32),
        )

    def freeze(self) -> "StyleExtractorModel":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self.eval()

    def unfreeze(self) -> "StyleExtractorModel":
        for p in self.parameters():
            p.requires_grad_(True)
        if self.cfg.vq_ema:
            self.codebook.weight.requires_grad_(False)
        self.frozen = False
        return self

    def train(self, mode: bool = True) -> "StyleExtractorModel":
        # batch-norm statistics of a frozen teacher must not drift
        return super().train(mode and not self.frozen)

    def _condition(self, f0, energy, text_style):
        f0_mean, f0_std, e_mean, e_std = self.prosody_stats
        f0n = torch.where(f0 > 0, (f0 - f0_mean) / f0_std, torch.zeros_like(f0))
        en = (energy - e_mean) / e_std
        return self.f0_proj(f0n[..., None]) + self.energy_proj(en[..., None]) + self.text_proj(text_style)[:, None, :]

    def encode(self, mel20, f0, energy, text_style) -> torch.Tensor:
        """(B, T, 20), (B, T), (B, T), (B, D) -> pre-quantisation latents (B, T, D)."""
        b, t, nb = mel20.shape
        if nb != self.n_bins:
            raise ShapeMismatch(f"expected {self.n_bins} mel bins, got {nb}")
        if f0.shape != (b, t) or energy.shape != (b, t):
            raise ShapeMismatch(f"mel20 has {t} frames but f0 {tuple(f0.shape)} / energy {tuple(energy.shape)}")
        x = ((mel20 - self.mel_mean) / self.mel_std)[:, None]
        h = self.block1(x)  # (B, c1, T, F/2)
        cond = self.cond_to_map(self._condition(f0, energy, text_style))
        h = h + cond.view(b, t, -1, self.f1).permute(0, 2, 1, 3)
        h = self.enc_res(self.block2(h))  # (B, c2, T, F/4)
        return self.latent_norm(self.to_latent(h.permute(0, 2, 1, 3).reshape(b, t, -1)))

    def decode(self, z_q, speaker) -> torch.Tensor:
        """(B, T, D) codes and (B,) speaker indices -> Mel20 on the input scale."""
        b, t, _ = z_q.shape
        h = self.from_latent(z_q) + self.speaker_proj(self.speaker_table(speaker))[:, None, :]
        h = h.view(b, t, -1, self.f2).permute(0, 2, 1, 3)
        out = self.up2(self.up1(self.dec_res(h)))[:, 0]
        return out * self.mel_std + self.mel_mean

    def forward(self, mel20, f0, energy, text_style, speaker):
        z = self.encode(mel20, f0, energy, text_style)
        q = quantize(self.codebook, z)
        return self.decode(q.z_q, speaker), z, q


class VQLoss(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    vq: torch.Tensor
    commit: torch.Tensor


def vq_terms(z: torch.Tensor, codewords: torch.Tensor) -> tuple:
    """(vq, commit): the codebook term moves codewords, the commitment term moves z."""
    vq = F.mse_loss(codewords, z.detach())
    commit = F.mse_loss(z, codewords.detach())
    return vq, commit


def vqvae_loss(model: StyleExtractorModel, batch: dict) -> VQLoss:
    recon_mel, z, q = model(batch["mel20"], batch["f0"], batch["energy"], batch["text_style"], batch["speaker"])
    recon = F.mse_loss(recon_mel, batch["mel20"])
    vq, commit = vq_terms(z, q.codewords)
    total = recon + vq + model.cfg.commitment_beta * commit
    return VQLoss(total, recon, vq, commit)


def extract_style(
    model: StyleExtractorModel, mel20, f0, energy, text_style, pre_quant: bool = False, return_indices: bool = False
):
    """H_se (T, D) for one utterance: the quantiser output (or the latents before it)."""
    mel20 = torch.as_tensor(np.asarray(mel20), dtype=torch.float32)
    f0 = torch.as_tensor(np.asarray(f0), dtype=torch.float32)
    energy = torch.as_tensor(np.asarray(energy), dtype=torch.float32)
    if mel20.dim() != 2 or f0.shape[0] != mel20.shape[0] or energy.shape[0] != mel20.shape[0]:
        raise ShapeMismatch(f"frame counts differ: mel20 {tuple(mel20.shape)}, f0 {tuple(f0.shape)}, energy {tuple(energy.shape)}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z = model.encode(mel20[None], f0[None], energy[None], torch.as_tensor(text_style, dtype=torch.float32).reshape(1, -1))[0]
        q = quantize(model.codebook, z)
    model.train(was_training)
    out = z if pre_quant else q.z_q
    return (out, q.indices) if return_indices else out


def text_styles_for(text_model, texts: Sequence[str], chunk: int = 64) -> torch.Tensor:
    """Utterance-level text style rows from the frozen text encoder."""
    rows = []
    with torch.no_grad():
        for i in range(0, len(texts), chunk):
            rows.append(text_model(list(texts[i : i + chunk]))[0])
    return torch.cat(rows) if rows else torch.zeros(0, text_model.d_style)


class _Utterance(NamedTuple):
    id: str
    mel20: torch.Tensor
    f0: torch.Tensor
    energy: torch.Tensor
    text_style: torch.Tensor
    speaker: int


def _load_utterances(manifest: Manifest, records: list, text_model, n_bins: int) -> list:
    styles = text_styles_for(text_model, [r.text for r in records])
    out = []
    for rec, style in zip(records, styles):
        feats = manifest.features(rec.id)
        out.append(
            _Utterance(
                rec.id,
                torch.from_numpy(low_band(feats.mel, n_bins)),
                torch.from_numpy(feats.f0.copy()),
                torch.from_numpy(feats.energy.copy()),
                style,
                manifest.speaker_index(rec.speaker_id),
            )
        )
    return out


def _collate(utts: list, segment: int, rng: np.random.Generator) -> dict:
    """Random equal-length crops so the batch stacks without padding."""
    length = min([segment] + [u.mel20.shape[0] for u in utts])
    cols = {"mel20": [], "f0": [], "energy": []}
    for u in utts:
        start = int(rng.integers(0, u.mel20.shape[0] - length + 1))
        cols["mel20"].append(u.mel20[start : start + length])
        cols["f0"].append(u.f0[start : start + length])
        cols["energy"].append(u.energy[start : start + length])
    batch = {k: torch.stack(v) for k, v in cols.items()}
    batch["text_style"] = torch.stack([u.text_style for u in utts])
    batch["speaker"] = torch.tensor([u.speaker for u in utts], dtype=torch.long)
    return batch


def _single(u: _Utterance) -> dict:
    return {
        "mel20": u.mel20[None],
        "f0": u.f0[None],
        "energy": u.energy[None],
        "text_style": u.text_style[None],
        "speaker": torch.tensor([u.speaker]),
    }


def code_counts(model: StyleExtractorModel, utts: list) -> torch.Tensor:
    counts = torch.zeros(model.codebook.size, dtype=torch.long)
    for u in utts:
        _, idx = extract_style(model, u.mel20, u.f0, u.energy, u.text_style, return_indices=True)
        counts += torch.bincount(idx, minlength=model.codebook.size)
    return counts


def pretrain_style_extractor(
    manifest: Manifest,
    text_model,
    cfg: StageConfig,
    model_cfg: Optional[ExtractorConfig] = None,
    run_dir: str | Path = "runs/style_extractor",
    resume: bool = True,
) -> StyleExtractorModel:
    """Stage ii: train the VQ-VAE on cached features with the text encoder frozen."""
    train_recs = manifest.split("train") or list(manifest.records)
    if not train_recs:
        raise EmptyCorpus("manifest has no utterances")
    model_cfg = model_cfg or ExtractorConfig()
    run_dir = Path(run_dir)
    text_model.freeze()
    seed_everything(cfg.seed)
    stats = manifest.stats()
    model = StyleExtractorModel(model_cfg, manifest.speakers, stats)

    train = _load_utterances(manifest, train_recs, text_model, model.n_bins)
    val = _load_utterances(manifest, manifest.split("val"), text_model, model.n_bins)
    gen = torch.Generator().manual_seed(cfg.seed)

    def batches(epoch: int) -> list:
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(train))
        groups = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        return [_collate([train[j] for j in g], model_cfg.segment_frames, rng) for g in groups]

    last_latents = []

    def step(batch) -> dict:
        losses = vqvae_loss(model, batch)
        if model_cfg.restart_dead_codes:
            last_latents[:] = [model.encode(batch["mel20"], batch["f0"], batch["energy"], batch["text_style"]).detach().reshape(-1, model_cfg.d_style)]
        return {"total": losses.total, "recon": losses.recon, "vq": losses.vq, "commit": losses.commit}

    def on_start() -> None:
        model.codebook.reset_usage()

    def on_epoch_end(epoch: int) -> dict:
        summary = {"train_perplexity": model.codebook.perplexity(code_counts(model, train))}
        summary["dead_codes"] = int((model.codebook.usage_counts == 0).sum())
        if model_cfg.restart_dead_codes and last_latents:
            summary["restarted"] = model.codebook.restart_dead(last_latents[0], gen)
        model.codebook.reset_usage()
        if val:
            with torch.no_grad():
                summary["val_loss"] = float(np.mean([float(vqvae_loss(model, _single(u)).recon) for u in val]))
        logger.info("extractor epoch %d: %s", epoch, summary)
        return summary

    def save(tag: str) -> None:
        save_style_extractor(run_dir / f"{tag}.safetensors", model)

    loop = StageLoop(run_dir, model, cfg, save)
    loop.start(resume)
    result = loop.run([Phase("vqvae", cfg.epochs, batches, step, on_start=on_start, on_epoch_end=on_epoch_end)])
    plot_losses(run_dir)
    model.last_run = result
    if not result.interrupted:
        save_style_extractor(run_dir / "style_extractor.safetensors", model)
    return model.freeze()


def save_style_extractor(path: str | Path, model: StyleExtractorModel) -> None:
    save_checkpoint(
        path,
        CHECKPOINT_KIND,
        model.state_dict(),
        asdict(model.cfg),
        {"speakers": model.speakers, "n_bins": model.n_bins, "d_style": model.cfg.d_style},
    )


def load_style_extractor(path: str | Path) -> StyleExtractorModel:
    """Load a style extractor checkpoint, returned frozen and in eval mode."""
    state, cfg, extra = load_checkpoint(path, CHECKPOINT_KIND)
    model = StyleExtractorModel(from_dict(ExtractorConfig, cfg), extra["speakers"], n_bins=extra["n_bins"])
    model.load_state_dict(state)
    return model.freeze()


def export_codes(model: StyleExtractorModel, manifest: Manifest, text_model, out_dir: str | Path) -> list:
    """Write ``<id>.json`` with the code index sequence of every utterance."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for u in _load_utterances(manifest, list(manifest.records), text_model, model.n_bins):
        _, idx = extract_style(model, u.mel20, u.f0, u.energy, u.text_style, return_indices=True)
        path = out_dir / f"{u.id}.json"
        path.write_text(json.dumps({"id": u.id, "codes": idx.tolist()}))
        written.append(path)
    return written


def utterance_embeddings(model: StyleExtractorModel, manifest: Manifest, text_model, records=None) -> tuple:
    """Time-mean of H_se per utterance: (ids, labels, (N, D) array)."""
    records = list(manifest.records) if records is None else records
    utts = _load_utterances(manifest, records, text_model, model.n_bins)
    rows = [extract_style(model, u.mel20, u.f0, u.energy, u.text_style).mean(0).numpy() for u in utts]
    return [r.id for r in records], [r.label for r in records], np.stack(rows) if rows else np.zeros((0, model.cfg.d_style))

