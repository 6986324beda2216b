"""Two-path acoustic model.

Phoneme path: FFT encoder -> length regulator -> FFT decoder.  Style path:
utterance text style -> extended variance adaptor (predictors see phonemes +
style; pitch and energy feed only the style branch) -> cross-attention style
decoder over the context window.  The style decoder output is injected into
every decoder block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AcousticConfig
from .errors import BadWindow, FrozenContractViolation, MissingTargets, ShapeMismatch, UnknownPhoneme
from .text_style import encode_context
from .layers import FFTBlock, MultiHeadAttention, VariancePredictor, length_regulate_batch, padding_mask, sinusoid_table

GROUPS = ("phoneme_encoder", "style_proj", "variance_adaptor", "style_decoder", "mel_decoder")


class PhonemeEncoder(nn.Module):
    def __init__(self, cfg: AcousticConfig, n_symbols: int):
        super().__init__()
        self.n_symbols = n_symbols
        self.embed = nn.Embedding(n_symbols + 1, cfg.d_model, padding_idx=0)
        self.register_buffer("pos", sinusoid_table(cfg.max_positions, cfg.d_model), persistent=False)
        self.blocks = nn.ModuleList(
            FFTBlock(cfg.d_model, cfg.n_heads, cfg.ffn_filter, cfg.ffn_kernel, cfg.dropout) for _ in range(cfg.enc_layers)
        )

    def forward(self, ids, mask=None):
        if bool(((ids < 0) | (ids > self.n_symbols)).any()):
            raise UnknownPhoneme(f"phoneme id outside 1..{self.n_symbols}")
        x = self.embed(ids) + self.pos[: ids.shape[1]][None]
        for block in self.blocks:
            x = block(x, mask)
        return x


class VarianceAdaptor(nn.Module):
    def __init__(self, cfg: AcousticConfig):
        super().__init__()
        args = (cfg.d_model, cfg.var_filter, cfg.var_kernel, cfg.var_dropout)
        self.duration_predictor = VariancePredictor(*args)
        self.pitch_predictor = VariancePredictor(*args)
        self.energy_predictor = VariancePredictor(*args)
        self.pitch_embed = nn.Conv1d(1, cfg.d_style, 3, padding=1)
        self.energy_embed = nn.Conv1d(1, cfg.d_style, 3, padding=1)

    def embed(self, pitch, energy):
        """Phoneme-level pitch/energy (B, N) -> summed style-width embeddings (B, N, D_style)."""
        return (self.pitch_embed(pitch[:, None]) + self.energy_embed(energy[:, None])).transpose(1, 2)


class StyleDecoder(nn.Module):
    """Cross-attention (query: frame style, key/value: context) + residual, then a conv stack."""

    def __init__(self, cfg: AcousticConfig):
        super().__init__()
        d = cfg.d_style
        self.attn = MultiHeadAttention(d, d, cfg.style_dec_heads)
        self.convs = nn.ModuleList(nn.Conv1d(d, d, cfg.style_dec_kernel, padding=cfg.style_dec_kernel // 2) for _ in range(cfg.style_dec_layers))
        self.norms = nn.ModuleList(nn.BatchNorm1d(d) for _ in range(cfg.style_dec_layers))
        self.out = nn.Linear(d, d)

    def forward(self, h_s_frame, h_cs, frame_mask=None, context_mask=None):
        a, weights = self.attn(h_s_frame, h_cs, h_cs, key_padding_mask=context_mask)
        x = h_s_frame + a
        keep = None if frame_mask is None else (~frame_mask)[:, None, :].to(x.dtype)
        x = x.transpose(1, 2)
        for conv, norm in zip(self.convs, self.norms):
            if keep is not None:
                x = x * keep
            x = F.relu(norm(conv(x)))
        out = self.out(x.transpose(1, 2))
        if frame_mask is not None:
            out = out.masked_fill(frame_mask[..., None], 0.0)
        return out, weights


class MelDecoder(nn.Module):
    def __init__(self, cfg: AcousticConfig, n_mels: int, inject: bool = True):
        super().__init__()
        self.register_buffer("pos", sinusoid_table(cfg.max_positions, cfg.d_model), persistent=False)
        self.blocks = nn.ModuleList(
            FFTBlock(cfg.d_model, cfg.n_heads, cfg.ffn_filter, cfg.ffn_kernel, cfg.dropout) for _ in range(cfg.dec_layers)
        )
        self.inject = None
        if inject:
            self.inject = nn.ModuleList(nn.Linear(cfg.d_style, cfg.d_model) for _ in range(cfg.dec_layers))
            for lin in self.inject:
                # start as a plain decoder; the style pathway is learned
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)
        self.mel_linear = nn.Linear(cfg.d_model, n_mels)

    def forward(self, x, h_sd=None, mask=None):
        if h_sd is not None and h_sd.shape[:2] != x.shape[:2]:
            raise ShapeMismatch(f"decoder input {tuple(x.shape[:2])} vs style {tuple(h_sd.shape[:2])}")
        x = x + self.pos[: x.shape[1]][None]
        for b, block in enumerate(self.blocks):
            if self.inject is not None and h_sd is not None:
                x = x + self.inject[b](h_sd)
            x = block(x, mask)
        return self.mel_linear(x), x


@dataclass
class AcousticOutput:
    mel: torch.Tensor  # (B, T, n_mels), normalised scale
    dur_pred: torch.Tensor  # (B, N) log(d + 1)
    pitch_pred: torch.Tensor  # (B, N)
    energy_pred: torch.Tensor  # (B, N)
    durations: torch.Tensor  # (B, N) the durations used for expansion
    h_p: torch.Tensor
    h_ps: torch.Tensor
    h_p_frame: torch.Tensor
    h_s_frame: torch.Tensor
    h_sd: torch.Tensor
    h_out: torch.Tensor
    src_mask: torch.Tensor
    mel_mask: torch.Tensor
    mel_lengths: torch.Tensor
    attn: Optional[torch.Tensor] = None


def durations_from_log(dur_pred: torch.Tensor, src_mask=None) -> torch.Tensor:
    """Invert log(d + 1): round half up, at least one frame per real phoneme."""
    d = torch.clamp(torch.floor(torch.exp(dur_pred) - 1.0 + 0.5), min=1).long()
    if src_mask is not None:
        d = d.masked_fill(src_mask, 0)
    return d


class AcousticModel(nn.Module):
    def __init__(self, cfg: AcousticConfig, n_symbols: int, n_mels: int = 80, mel_mean=None, mel_std=None):
        super().__init__()
        self.cfg = cfg
        self.n_symbols = n_symbols
        self.n_mels = n_mels
        ablation = cfg.ablation
        self.phoneme_encoder = PhonemeEncoder(cfg, n_symbols)
        self.style_proj = None if ablation == "no_style_encoder" else nn.Linear(cfg.d_style, cfg.d_model)
        self.variance_adaptor = VarianceAdaptor(cfg)
        self.style_decoder = None if ablation == "no_style_decoder" else StyleDecoder(cfg)
        self.mel_decoder = MelDecoder(cfg, n_mels, inject=self.style_decoder is not None)
        self.register_buffer("mel_mean", torch.as_tensor(mel_mean if mel_mean is not None else np.zeros(n_mels), dtype=torch.float32))
        self.register_buffer("mel_std", torch.as_tensor(mel_std if mel_std is not None else np.ones(n_mels), dtype=torch.float32))

    def groups(self) -> dict:
        """Top-level parameter groups present in this configuration."""
        return {g: getattr(self, g) for g in GROUPS if getattr(self, g) is not None}

    def group_param_counts(self) -> dict:
        return {g: sum(p.numel() for p in m.parameters()) for g, m in self.groups().items()}

    def normalize_mel(self, mel):
        return (mel - self.mel_mean) / self.mel_std

    def denormalize_mel(self, mel):
        return mel * self.mel_std + self.mel_mean

    def forward(self, ids, h_s, h_cs, src_lengths=None, targets: Optional[dict] = None, context_mask=None) -> AcousticOutput:
        """ids (B, N); h_s (B, D_style); h_cs (B, 2k+1, D_style).

        ``targets`` holds phoneme-level ``durations``, ``pitch`` and ``energy``
        (normalised); when given they are teacher-forced.  Training mode
        requires them.
        """
        if targets is None and self.training:
            raise MissingTargets("training-mode forward needs ground-truth durations, pitch and energy")
        b, n = ids.shape
        if src_lengths is None:
            src_lengths = torch.full((b,), n, dtype=torch.long)
        src_mask = padding_mask(src_lengths, n)
        h_p = self.phoneme_encoder(ids, src_mask)
        if self.style_proj is None:
            h_s = torch.zeros_like(h_s)
            h_cs = torch.zeros_like(h_cs)
            h_ps = h_p
        else:
            h_ps = h_p + self.style_proj(h_s)[:, None, :]
        va = self.variance_adaptor
        dur_pred = va.duration_predictor(h_ps, src_mask)
        pitch_pred = va.pitch_predictor(h_ps, src_mask)
        energy_pred = va.energy_predictor(h_ps, src_mask)
        if targets is not None:
            durations = targets["durations"].long().masked_fill(src_mask, 0)
            pitch, energy = targets["pitch"], targets["energy"]
        else:
            durations = durations_from_log(dur_pred, src_mask)
            pitch, energy = pitch_pred, energy_pred
        style_ph = h_s[:, None, :] + va.embed(pitch, energy)
        h_s_frame, mel_lengths = length_regulate_batch(style_ph, durations, src_mask)
        h_p_frame, _ = length_regulate_batch(h_p, durations, src_mask)
        mel_mask = padding_mask(mel_lengths, h_p_frame.shape[1])
        attn = None
        if self.style_decoder is None:
            # single decoder over the summed paths; the distillation target is H_s'
            h_sd = h_s_frame
            mel, h_out = self.mel_decoder(h_p_frame + h_s_frame, None, mel_mask)
        else:
            h_sd, attn = self.style_decoder(h_s_frame, h_cs, mel_mask, context_mask)
            mel, h_out = self.mel_decoder(h_p_frame, h_sd, mel_mask)
        mel = mel.masked_fill(mel_mask[..., None], 0.0)
        return AcousticOutput(
            mel, dur_pred, pitch_pred, energy_pred, durations, h_p, h_ps, h_p_frame, h_s_frame, h_sd, h_out,
            src_mask, mel_mask, mel_lengths, attn,
        )


def _masked_mean(x: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    keep = keep.to(x.dtype)
    while keep.dim() < x.dim():
        keep = keep[..., None]
    keep = keep.expand_as(x)
    return (x * keep).sum() / keep.sum().clamp_min(1.0)


def style_loss(h_sd: torch.Tensor, h_se: torch.Tensor, mel_mask=None) -> torch.Tensor:
    """Mean squared error between style decoder output and extractor codes."""
    if h_sd.shape != h_se.shape:
        raise ShapeMismatch(f"H_sd {tuple(h_sd.shape)} vs H_se {tuple(h_se.shape)}")
    keep = torch.ones(h_sd.shape[:2], dtype=torch.bool) if mel_mask is None else ~mel_mask
    return _masked_mean((h_sd - h_se) ** 2, keep)


def acoustic_losses(out: AcousticOutput, batch: dict, alpha: float = 1.0) -> dict:
    """mel L1, log-duration MSE, pitch/energy MSE, style MSE; ``tts`` and ``total``."""
    frame_keep, ph_keep = ~out.mel_mask, ~out.src_mask
    mel_t = batch["mel"]
    if mel_t.shape[1] != out.mel.shape[1]:
        raise ShapeMismatch(f"mel target has {mel_t.shape[1]} frames, prediction {out.mel.shape[1]}")
    losses = {
        "mel": _masked_mean((out.mel - mel_t).abs(), frame_keep),
        "dur": _masked_mean((out.dur_pred - torch.log(batch["durations"].to(out.dur_pred.dtype) + 1.0)) ** 2, ph_keep),
        "pitch": _masked_mean((out.pitch_pred - batch["pitch"]) ** 2, ph_keep),
        "energy": _masked_mean((out.energy_pred - batch["energy"]) ** 2, ph_keep),
        "style": style_loss(out.h_sd, batch["h_se"], out.mel_mask),
    }
    losses["tts"] = losses["mel"] + losses["dur"] + losses["pitch"] + losses["energy"]
    losses["total"] = losses["tts"] + alpha * losses["style"]
    return losses


def check_frozen(**teachers) -> None:
    """Raise if any teacher is not frozen or has trainable parameters."""
    for name, model in teachers.items():
        if model is None:
            continue
        if not getattr(model, "frozen", False) or any(p.requires_grad for p in model.parameters()):
            raise FrozenContractViolation(f"{name} must be frozen during TTS training")


def forward_train(model: AcousticModel, batch: dict, text_model=None, extractor=None, alpha: float = 1.0) -> dict:
    """Teacher-forced forward and losses; teachers are checked for the freeze contract."""
    check_frozen(text_style=text_model, style_extractor=extractor)
    out = model(
        batch["ids"], batch["h_s"], batch["h_cs"], batch.get("src_lengths"),
        targets={"durations": batch["durations"], "pitch": batch["pitch"], "energy": batch["energy"]},
    )
    losses = acoustic_losses(out, batch, alpha)
    losses["output"] = out
    return losses


@torch.no_grad()
def forward_infer(model: AcousticModel, phoneme_ids: Sequence[int], context_texts: Sequence[str], text_model) -> AcousticOutput:
    """Free-running synthesis of one utterance from phoneme ids and its context window.

    Only the text model is consulted for style; no style extractor is involved.
    """
    if len(context_texts) % 2 != 1:
        raise BadWindow(f"context window must have odd length, got {len(context_texts)}")
    model.eval()
    h_cs = encode_context(text_model, list(context_texts))
    h_s = h_cs[len(context_texts) // 2]
    ids = torch.as_tensor(list(phoneme_ids), dtype=torch.long)[None]
    return model(ids, h_s[None], h_cs[None])

