"""Utterance-level text style encoder.

A small transformer trained from scratch on unlabeled sentences: first with a
temperature-scaled contrastive objective where the positive is the same
sentence with one emotion word swapped for a same-emotion word, then jointly
with deep embedded clustering and an autoencoder reconstruction term.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.cluster import KMeans

from .checkpoint import load_checkpoint, save_checkpoint
from .config import StageConfig, TextStyleConfig, from_dict
from .errors import BadWindow, ContrastiveBatchTooSmall, EmptyCorpus
from .layers import sinusoid_table
from .loop import Phase, StageLoop, plot_losses, seed_everything

logger = logging.getLogger(__name__)

PAD, UNK = 0, 1
_PUNCT = ".,;:!?\"'()-"
CHECKPOINT_KIND = "text_style"


class Tokenizer:
    """Whitespace words, with unseen or rare words spelled out as characters."""

    def __init__(self, words: Sequence[str], chars: Sequence[str], max_tokens: int = 64):
        self.words = list(words)
        self.chars = list(chars)
        self.max_tokens = max_tokens
        self._word_ids = {w: i + 2 for i, w in enumerate(self.words)}
        self._char_ids = {c: i + 2 + len(self.words) for i, c in enumerate(self.chars)}

    @classmethod
    def build(cls, corpus: Sequence[str], min_count: int = 2, max_tokens: int = 64) -> "Tokenizer":
        counts = Counter(w for text in corpus for w in _words(text))
        words = sorted(w for w, c in counts.items() if c >= min_count)
        chars = sorted({c for text in corpus for c in text.lower() if not c.isspace()})
        return cls(words, chars, max_tokens)

    @property
    def vocab_size(self) -> int:
        return 2 + len(self.words) + len(self.chars)

    def encode(self, text: str) -> list:
        ids = []
        for word in _words(text):
            if word in self._word_ids:
                ids.append(self._word_ids[word])
            else:
                ids.extend(self._char_ids.get(c, UNK) for c in word)
        return ids[: self.max_tokens]

    def to_json(self) -> dict:
        return {"words": self.words, "chars": self.chars, "max_tokens": self.max_tokens}

    @classmethod
    def from_json(cls, obj: dict) -> "Tokenizer":
        return cls(obj["words"], obj["chars"], obj["max_tokens"])


def _words(text: str) -> list:
    out = []
    for raw in text.lower().split():
        w = raw.strip(_PUNCT)
        out.append(w if w else raw)
    return out


class EmotionLexicon:
    """word -> same-emotion substitutes."""

    def __init__(self, entries: dict):
        self.entries = {k.lower(): [s.lower() for s in v] for k, v in entries.items()}

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.entries

    def is_closed(self) -> bool:
        return all(s in self.entries for subs in self.entries.values() for s in subs)

    @classmethod
    def load(cls, path: str | Path, require_closed: bool = True) -> "EmotionLexicon":
        lex = cls(json.loads(Path(path).read_text(encoding="utf-8")))
        if require_closed and not lex.is_closed():
            missing = sorted({s for v in lex.entries.values() for s in v if s not in lex.entries})
            raise ValueError(f"lexicon is not closed under substitution; missing entries: {missing}")
        return lex


class Augmented(NamedTuple):
    text: str
    flag: str  # "augmented" or "no_augmentation"


def augment_positive(lexicon: EmotionLexicon, text: str, rng_seed: int) -> Augmented:
    """Swap one lexicon word (chosen by the seed) for a seeded same-emotion substitute."""
    pieces = re.split(r"(\s+)", text)
    slots = []
    for i, piece in enumerate(pieces):
        core = piece.strip(_PUNCT).lower()
        if core and core in lexicon.entries and lexicon.entries[core]:
            slots.append(i)
    if not slots:
        return Augmented(text, "no_augmentation")
    rng = np.random.default_rng(rng_seed)
    i = slots[int(rng.integers(len(slots)))]
    piece = pieces[i]
    core = piece.strip(_PUNCT)
    subs = lexicon.entries[core.lower()]
    sub = subs[int(rng.integers(len(subs)))]
    if core[:1].isupper():
        sub = sub[:1].upper() + sub[1:]
    start = piece.find(core)
    pieces[i] = piece[:start] + sub + piece[start + len(core) :]
    return Augmented("".join(pieces), "augmented")


class TextStyleModel(nn.Module):
    def __init__(self, cfg: TextStyleConfig, tokenizer: Tokenizer):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.frozen = False
        d = cfg.text_d_model
        self.embed = nn.Embedding(tokenizer.vocab_size, d, padding_idx=PAD)
        self.register_buffer("pos", sinusoid_table(tokenizer.max_tokens + 1, d), persistent=False)
        layer = nn.TransformerEncoderLayer(
            d, cfg.text_heads, cfg.text_ff, cfg.text_dropout, batch_first=True
        )
        self.backbone = nn.TransformerEncoder(layer, cfg.text_layers, enable_nested_tensor=False)
        self.projection = nn.Linear(d, cfg.d_style)
        self.null_embedding = nn.Parameter(torch.randn(cfg.d_style) * 0.02)
        self.centroids = nn.Parameter(torch.zeros(cfg.n_clusters, cfg.d_style))
        self.recon_head = nn.Sequential(nn.Linear(cfg.d_style, d), nn.ReLU(), nn.Linear(d, d))

    @property
    def d_style(self) -> int:
        return self.cfg.d_style

    def freeze(self) -> "TextStyleModel":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self.eval()

    def train(self, mode: bool = True) -> "TextStyleModel":
        # a frozen teacher stays in eval mode so dropout never fires
        return super().train(mode and not self.frozen)

    def unfreeze(self) -> "TextStyleModel":
        for p in self.parameters():
            p.requires_grad_(True)
        self.frozen = False
        return self

    def forward(self, texts: Sequence[str]) -> tuple:
        """Style vectors (B, D_style) and mean-pooled backbone output (B, d_model)."""
        ids = [self.tokenizer.encode(t) for t in texts]
        empty = torch.tensor([len(x) == 0 for x in ids])
        ids = [x if x else [UNK] for x in ids]
        max_len = max(len(x) for x in ids)
        tokens = torch.tensor([x + [PAD] * (max_len - len(x)) for x in ids])
        mask = tokens == PAD
        x = self.embed(tokens) + self.pos[:max_len][None]
        h = self.backbone(x, src_key_padding_mask=mask if bool(mask.any()) else None)
        keep = (~mask).unsqueeze(-1).to(h.dtype)
        pooled = (h * keep).sum(1) / keep.sum(1)
        style = self.projection(pooled)
        style = torch.where(empty[:, None], self.null_embedding.expand_as(style), style)
        return style, pooled


def encode_style(model: TextStyleModel, text: str) -> torch.Tensor:
    """(D_style,) style vector; the learned null embedding for empty text."""
    with torch.set_grad_enabled(torch.is_grad_enabled() and not model.frozen):
        return model([text])[0][0]


def encode_context(model: TextStyleModel, window: Sequence[str]) -> torch.Tensor:
    """(2k+1, D_style): row ``i`` is ``encode_style(window[i])``."""
    if len(window) % 2 != 1:
        raise BadWindow(f"context window must have odd length, got {len(window)}")
    return torch.stack([encode_style(model, t) for t in window])


def contrastive_loss(anchor: torch.Tensor, positive: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetric normalised temperature-scaled cross-entropy with in-batch negatives."""
    if anchor.shape[0] < 2:
        raise ContrastiveBatchTooSmall("contrastive learning needs at least two texts per batch")
    a = F.normalize(anchor, dim=-1)
    p = F.normalize(positive, dim=-1)
    logits = a @ p.T / temperature
    target = torch.arange(a.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def soft_assignment(z: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    """Student-t similarity of each embedding to each centroid, rows sum to 1."""
    q = 1.0 / (1.0 + torch.cdist(z, centroids) ** 2)
    return q / q.sum(dim=1, keepdim=True)


def target_distribution(q: torch.Tensor) -> torch.Tensor:
    w = q**2 / q.sum(dim=0)
    return w / w.sum(dim=1, keepdim=True)


def clustering_loss(z: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    q = soft_assignment(z, centroids)
    p = target_distribution(q).detach()
    return F.kl_div(q.clamp_min(1e-12).log(), p, reduction="batchmean")


def _batches(n: int, batch_size: int, seed: int) -> list:
    order = np.random.default_rng(seed).permutation(n)
    batches = [order[i : i + batch_size].tolist() for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2].extend(batches.pop())
    return batches


def pretrain_style_encoder(
    corpus: Sequence[str],
    cfg: StageConfig,
    model_cfg: Optional[TextStyleConfig] = None,
    lexicon: Optional[EmotionLexicon] = None,
    run_dir: str | Path = "runs/text_style",
    resume: bool = True,
) -> TextStyleModel:
    """Contrastive phase, then clustering + reconstruction + contrastive phase."""
    # duplicates would be false negatives for each other
    corpus = list(dict.fromkeys(t.strip() for t in corpus if t.strip()))
    if not corpus:
        raise EmptyCorpus("text corpus is empty")
    if cfg.batch_size < 2 or len(corpus) < 2:
        raise ContrastiveBatchTooSmall("contrastive pre-training needs batches of at least two texts")
    model_cfg = model_cfg or TextStyleConfig()
    lexicon = lexicon or EmotionLexicon({})
    run_dir = Path(run_dir)
    seed_everything(cfg.seed)
    model = TextStyleModel(model_cfg, Tokenizer.build(corpus, max_tokens=model_cfg.text_max_tokens))

    def positives(idx: list, epoch: int, b: int) -> list:
        base = cfg.augment_seed * 1_000_003 + epoch * 10_007 + b * 101
        return [augment_positive(lexicon, corpus[i], base + j).text for j, i in enumerate(idx)]

    def make_batches(offset: int):
        def fn(epoch: int) -> list:
            seed = cfg.seed + 7919 * (offset + epoch)
            return [(epoch + offset, b, idx) for b, idx in enumerate(_batches(len(corpus), cfg.batch_size, seed))]

        return fn

    def contrastive_step(batch) -> dict:
        epoch, b, idx = batch
        anchor, _ = model([corpus[i] for i in idx])
        pos, _ = model(positives(idx, epoch, b))
        loss = contrastive_loss(anchor, pos, model_cfg.temperature)
        return {"total": loss, "contrastive": loss.detach()}

    def joint_step(batch) -> dict:
        epoch, b, idx = batch
        anchor, pooled = model([corpus[i] for i in idx])
        pos, _ = model(positives(idx, epoch, b))
        con = contrastive_loss(anchor, pos, model_cfg.temperature)
        clu = clustering_loss(anchor, model.centroids)
        rec = F.mse_loss(model.recon_head(anchor), pooled.detach())
        return {"total": con + clu + rec, "contrastive": con.detach(), "cluster": clu.detach(), "recon": rec.detach()}

    def init_centroids() -> None:
        model.eval()
        with torch.no_grad():
            z = torch.cat([model([corpus[i] for i in chunk])[0] for chunk in np.array_split(np.arange(len(corpus)), max(1, len(corpus) // 64))])
        km = KMeans(n_clusters=model_cfg.n_clusters, n_init=10, random_state=cfg.seed).fit(z.numpy())
        model.centroids.data.copy_(torch.tensor(km.cluster_centers_, dtype=torch.float32))
        model.train()

    def save(tag: str) -> None:
        save_text_style(run_dir / f"{tag}.safetensors", model)

    loop = StageLoop(run_dir, model, cfg, save)
    loop.start(resume)
    phases = [
        Phase("contrastive", cfg.phase1_epochs, make_batches(0), contrastive_step),
        Phase("joint", cfg.phase2_epochs, make_batches(cfg.phase1_epochs), joint_step, on_start=init_centroids),
    ]
    result = loop.run(phases)
    plot_losses(run_dir)
    model.eval()
    model.last_run = result
    if not result.interrupted:
        save_text_style(run_dir / "text_style.safetensors", model)
    return model


def save_text_style(path: str | Path, model: TextStyleModel) -> None:
    save_checkpoint(
        path,
        CHECKPOINT_KIND,
        model.state_dict(),
        asdict(model.cfg),
        {"tokenizer": model.tokenizer.to_json(), "d_style": model.cfg.d_style},
    )


def load_text_style(path: str | Path) -> TextStyleModel:
    """Load a text style checkpoint, returned frozen and in eval mode."""
    state, cfg, extra = load_checkpoint(path, CHECKPOINT_KIND)
    model = TextStyleModel(from_dict(TextStyleConfig, cfg), Tokenizer.from_json(extra["tokenizer"]))
    model.load_state_dict(state)
    return model.freeze()
