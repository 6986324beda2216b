"""Transformer building blocks in the FastSpeech 2 style."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pad_sequence

from .errors import EmptyExpansion, ShapeMismatch


def sinusoid_table(n_position: int, d_hid: int) -> torch.Tensor:
    position = np.arange(n_position)[:, None]
    div = np.power(10000.0, 2 * (np.arange(d_hid) // 2) / d_hid)
    table = position / div
    table[:, 0::2] = np.sin(table[:, 0::2])
    table[:, 1::2] = np.cos(table[:, 1::2])
    return torch.tensor(table, dtype=torch.float32)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; queries and keys may come from different sequences."""

    def __init__(self, d_query: int, d_key: int, n_heads: int, d_out: Optional[int] = None, dropout: float = 0.0):
        super().__init__()
        d_out = d_out or d_query
        if d_out % n_heads:
            raise ValueError("output width must divide by the head count")
        self.n_heads = n_heads
        self.d_head = d_out // n_heads
        self.w_q = nn.Linear(d_query, d_out)
        self.w_k = nn.Linear(d_key, d_out)
        self.w_v = nn.Linear(d_key, d_out)
        self.fc = nn.Linear(d_out, d_out)
        self.dropout = nn.Dropout(dropout)

    def forward(self, q, k, v, key_padding_mask=None):
        """q: (B, Lq, Dq); k, v: (B, Lk, Dk); mask True marks padded keys.

        Returns the output (B, Lq, D) and weights (B, H, Lq, Lk).
        """
        b, lq, _ = q.shape
        lk = k.shape[1]
        q = self.w_q(q).view(b, lq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.w_k(k).view(b, lk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.w_v(v).view(b, lk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_padding_mask is not None:
            scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (self.dropout(attn) @ v).transpose(1, 2).reshape(b, lq, -1)
        return self.fc(out), attn


class ConvFeedForward(nn.Module):
    def __init__(self, d_model: int, d_inner: int, kernel_sizes=(9, 1), dropout: float = 0.1):
        super().__init__()
        self.w_1 = nn.Conv1d(d_model, d_inner, kernel_sizes[0], padding=(kernel_sizes[0] - 1) // 2)
        self.w_2 = nn.Conv1d(d_inner, d_model, kernel_sizes[1], padding=(kernel_sizes[1] - 1) // 2)
        self.layer_norm = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        residual = x
        out = self.w_2(F.relu(self.w_1(x.transpose(1, 2)))).transpose(1, 2)
        return self.layer_norm(self.dropout(out) + residual)


class FFTBlock(nn.Module):
    """Self-attention then 1D-conv feed-forward, each with residual + LayerNorm."""

    def __init__(self, d_model: int, n_heads: int, d_inner: int, kernel_size: int, dropout: float = 0.1):
        super().__init__()
        self.slf_attn = MultiHeadAttention(d_model, d_model, n_heads, dropout=dropout)
        self.attn_norm = nn.LayerNorm(d_model)
        self.attn_dropout = nn.Dropout(dropout)
        self.pos_ffn = ConvFeedForward(d_model, d_inner, (kernel_size, 1), dropout)

    def forward(self, x, mask=None):
        out, _ = self.slf_attn(x, x, x, key_padding_mask=mask)
        out = self.attn_norm(self.attn_dropout(out) + x)
        if mask is not None:
            out = out.masked_fill(mask[..., None], 0.0)
        out = self.pos_ffn(out)
        if mask is not None:
            out = out.masked_fill(mask[..., None], 0.0)
        return out


class VariancePredictor(nn.Module):
    """Two conv→ReLU→LayerNorm→dropout layers and a scalar head per position."""

    def __init__(self, d_in: int, d_filter: int = 256, kernel_size: int = 3, dropout: float = 0.1):
        super().__init__()
        self.conv1 = nn.Conv1d(d_in, d_filter, kernel_size, padding=(kernel_size - 1) // 2)
        self.norm1 = nn.LayerNorm(d_filter)
        self.conv2 = nn.Conv1d(d_filter, d_filter, kernel_size, padding=(kernel_size - 1) // 2)
        self.norm2 = nn.LayerNorm(d_filter)
        self.dropout = nn.Dropout(dropout)
        self.linear = nn.Linear(d_filter, 1)

    def forward(self, x, mask=None):
        x = self.dropout(self.norm1(F.relu(self.conv1(x.transpose(1, 2))).transpose(1, 2)))
        x = self.dropout(self.norm2(F.relu(self.conv2(x.transpose(1, 2))).transpose(1, 2)))
        out = self.linear(x).squeeze(-1)
        if mask is not None:
            out = out.masked_fill(mask, 0.0)
        return out


def length_regulate(hidden: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row ``i`` of ``hidden`` (N, D) ``durations[i]`` times."""
    durations = torch.as_tensor(durations, dtype=torch.long, device=hidden.device)
    if durations.dim() != 1 or durations.shape[0] != hidden.shape[0]:
        raise ShapeMismatch(f"{hidden.shape[0]} rows but {tuple(durations.shape)} durations")
    if bool((durations < 0).any()):
        raise ValueError("durations must be non-negative")
    if int(durations.sum()) == 0:
        raise EmptyExpansion("all durations are zero")
    return torch.repeat_interleave(hidden, durations, dim=0)


def length_regulate_batch(hidden: torch.Tensor, durations: torch.Tensor, src_mask=None) -> tuple:
    """Batched expansion of (B, N, D) by (B, N) durations; returns (out, lengths)."""
    if src_mask is not None:
        durations = durations.masked_fill(src_mask, 0)
    rows = [torch.repeat_interleave(h, d, dim=0) for h, d in zip(hidden, durations)]
    return pad_sequence(rows, batch_first=True), durations.sum(dim=1)


def padding_mask(lengths: torch.Tensor, max_len: Optional[int] = None) -> torch.Tensor:
    """True at padded positions."""
    max_len = max_len or int(lengths.max())
    return torch.arange(max_len, device=lengths.device)[None, :] >= lengths[:, None]
