"""Three-stage orchestration: text style -> style extractor -> TTS.

Each stage writes its checkpoints, a per-step loss log and ``run.json`` into
its run directory.  Stage iii trains the acoustic model against cached
outputs of the two frozen teachers and verifies their checksums.
"""

from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch.nn.utils.rnn import pad_sequence

from .acoustic import AcousticModel, acoustic_losses, check_frozen, forward_train
from .checkpoint import checkpoint_kind, load_checkpoint, module_checksum, save_checkpoint
from .config import (
    AcousticConfig,
    ExtractorConfig,
    FeatureConfig,
    StageConfig,
    TextStyleConfig,
    build,
    config_hash,
    from_dict,
)
from .corpus import Manifest, NormStats, build_context_window, iter_texts
from .errors import CheckpointMissing, EmptyCorpus, StageOrderViolation
from .features import phoneme_average
from .loop import LOSS_LOG, Phase, StageLoop, plot_losses, seed_everything
from .text_style import EmotionLexicon, encode_context, load_text_style, pretrain_style_encoder
from .vqvae import extract_style, load_style_extractor, pretrain_style_extractor

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "acoustic"
RUN_FILE = "run.json"


@dataclass
class RunManifest:
    stage: str
    config_hash: str
    checkpoints: dict
    loss_log: str
    steps: int = 0
    interrupted: bool = False
    frozen_report: list = field(default_factory=list)
    inputs: dict = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def teacher_checksums(**models) -> dict:
    return {name: module_checksum(m) for name, m in models.items() if m is not None}


def verify_frozen(before: dict, after: dict, frozen) -> list:
    """Names of frozen components whose checksum changed (empty means the contract held)."""
    return [name for name in frozen if name in before and before[name] != after.get(name)]


def _require(path: Optional[str | Path], kind: str, stage: str) -> Path:
    if path is None or not Path(path).exists():
        raise StageOrderViolation(f"stage {stage!r} needs a {kind!r} checkpoint from an earlier stage (got {path})")
    found = checkpoint_kind(path)
    if found != kind:
        raise StageOrderViolation(f"stage {stage!r} expected a {kind!r} checkpoint, {path} holds {found!r}")
    return Path(path)


# ---------------------------------------------------------------- stage iii data


def _phoneme_targets(feats, rec, stats: NormStats) -> tuple:
    speaker = rec.speaker_id if stats.scope == "speaker" else None
    pitch = phoneme_average(stats.norm_f0(feats.f0, speaker), rec.durations)
    energy = phoneme_average(stats.norm_energy(feats.energy, speaker), rec.durations)
    return pitch, energy


def build_tts_examples(manifest: Manifest, records: list, text_model, extractor, k: int, style_target: str = "post_quant") -> list:
    """Teacher outputs and targets per utterance, computed once."""
    stats = manifest.stats()
    mel_mean = np.asarray(stats.mel_mean, dtype=np.float32)
    mel_std = np.asarray(stats.mel_std, dtype=np.float32)
    examples = []
    with torch.no_grad():
        for rec in records:
            feats = manifest.features(rec.id)
            h_cs = encode_context(text_model, build_context_window(manifest, rec.id, k))
            h_s = h_cs[k]
            h_se = extract_style(extractor, feats.mel20, feats.f0, feats.energy, h_s, pre_quant=style_target == "pre_quant")
            pitch, energy = _phoneme_targets(feats, rec, stats)
            examples.append(
                {
                    "id": rec.id,
                    "ids": torch.tensor(manifest.phoneme_ids(rec.phonemes), dtype=torch.long),
                    "durations": torch.tensor(rec.durations, dtype=torch.long),
                    "pitch": torch.tensor(pitch, dtype=torch.float32),
                    "energy": torch.tensor(energy, dtype=torch.float32),
                    "mel": torch.from_numpy((feats.mel - mel_mean) / mel_std),
                    "h_s": h_s,
                    "h_cs": h_cs,
                    "h_se": h_se,
                }
            )
    return examples


def collate_tts(examples: list) -> dict:
    def pad(key):
        return pad_sequence([e[key] for e in examples], batch_first=True)

    return {
        "ids": pad("ids"),
        "src_lengths": torch.tensor([len(e["ids"]) for e in examples]),
        "durations": pad("durations"),
        "pitch": pad("pitch"),
        "energy": pad("energy"),
        "mel": pad("mel"),
        "h_se": pad("h_se"),
        "h_s": torch.stack([e["h_s"] for e in examples]),
        "h_cs": torch.stack([e["h_cs"] for e in examples]),
    }


def build_acoustic(model_cfg: AcousticConfig, manifest: Manifest) -> AcousticModel:
    stats = manifest.stats()
    return AcousticModel(model_cfg, len(manifest.phoneme_inventory), len(stats.mel_mean), stats.mel_mean, stats.mel_std)


def train_tts(
    manifest: Manifest,
    text_model,
    extractor,
    cfg: StageConfig,
    model_cfg: Optional[AcousticConfig] = None,
    run_dir: str | Path = "runs/tts",
    resume: bool = True,
    k: int = 2,
    feature_cfg: Optional[FeatureConfig] = None,
    after_step=None,
):
    """Stage iii: teacher-forced training with L_tts + alpha * L_style."""
    model_cfg = model_cfg or AcousticConfig()
    if cfg.ablation != "none":
        model_cfg = build(AcousticConfig, asdict(model_cfg), ablation=cfg.ablation)
    check_frozen(text_style=text_model, style_extractor=extractor)
    train_recs = manifest.split("train") or list(manifest.records)
    if not train_recs:
        raise EmptyCorpus("manifest has no utterances")
    run_dir = Path(run_dir)
    seed_everything(cfg.seed)
    model = build_acoustic(model_cfg, manifest)
    train = build_tts_examples(manifest, train_recs, text_model, extractor, k, cfg.style_target)
    val = build_tts_examples(manifest, manifest.split("val"), text_model, extractor, k, cfg.style_target)
    before = teacher_checksums(text_style=text_model, style_extractor=extractor)
    reports = []

    def batches(epoch: int) -> list:
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
        return [collate_tts([train[j] for j in order[i : i + cfg.batch_size]]) for i in range(0, len(order), cfg.batch_size)]

    def step(batch) -> dict:
        losses = forward_train(model, batch, text_model, extractor, cfg.alpha)
        losses.pop("output")
        return losses

    def on_epoch_end(epoch: int) -> dict:
        report = verify_frozen(before, teacher_checksums(text_style=text_model, style_extractor=extractor), cfg.freeze)
        reports.extend(r for r in report if r not in reports)
        summary = {"frozen_violations": len(report)}
        if val:
            with torch.no_grad():
                out = model(**_model_inputs(collate_tts(val)))
                summary["val_loss"] = float(acoustic_losses(out, collate_tts(val), cfg.alpha)["total"])
        return summary

    def save(tag: str) -> None:
        save_acoustic(run_dir / f"{tag}.safetensors", model, manifest, k, feature_cfg)

    loop = StageLoop(run_dir, model, cfg, save)
    loop.start(resume)
    result = loop.run([Phase("tts", cfg.epochs, batches, step, on_epoch_end=on_epoch_end, after_step=after_step)])
    plot_losses(run_dir)
    after = teacher_checksums(text_style=text_model, style_extractor=extractor)
    reports.extend(r for r in verify_frozen(before, after, cfg.freeze) if r not in reports)
    model.eval()
    model.last_run = result
    model.frozen_report = reports
    model.teacher_checksums = (before, after)
    if not result.interrupted:
        save_acoustic(run_dir / "acoustic.safetensors", model, manifest, k, feature_cfg)
    return model


def _model_inputs(batch: dict) -> dict:
    return {
        "ids": batch["ids"],
        "h_s": batch["h_s"],
        "h_cs": batch["h_cs"],
        "src_lengths": batch["src_lengths"],
        "targets": {"durations": batch["durations"], "pitch": batch["pitch"], "energy": batch["energy"]},
    }


def save_acoustic(path, model: AcousticModel, manifest: Manifest, k: int, feature_cfg: Optional[FeatureConfig] = None) -> None:
    save_checkpoint(
        path,
        CHECKPOINT_KIND,
        model.state_dict(),
        asdict(model.cfg),
        {
            "phoneme_inventory": manifest.phoneme_inventory,
            "stats": manifest.stats().to_json(),
            "context_k": k,
            "features": asdict(feature_cfg or FeatureConfig()),
        },
    )


def load_acoustic(path) -> tuple:
    """Return ``(model, extra)`` with the model in eval mode."""
    state, cfg, extra = load_checkpoint(path, CHECKPOINT_KIND)
    stats = extra["stats"]
    model = AcousticModel(from_dict(AcousticConfig, cfg), len(extra["phoneme_inventory"]), len(stats["mel_mean"]))
    model.load_state_dict(state)
    return model.eval(), extra


# ---------------------------------------------------------------- stage runner


def run_stage(cfg: StageConfig, inputs: dict, flat: Optional[dict] = None, resume: bool = True) -> RunManifest:
    """Run one stage.

    ``inputs`` keys: ``run_dir`` (required); ``text`` and ``lexicon`` for
    text_style; ``manifest`` for the audio stages; ``text_ckpt`` for stages
    ii and iii; ``extractor_ckpt`` for stage iii.
    """
    flat = dict(flat or {})
    run_dir = Path(inputs["run_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    feature_cfg = build(FeatureConfig, flat)
    if cfg.stage == "text_style":
        texts = list(iter_texts(inputs["text"]))
        lexicon = EmotionLexicon.load(inputs["lexicon"]) if inputs.get("lexicon") else None
        model = pretrain_style_encoder(texts, cfg, build(TextStyleConfig, flat), lexicon, run_dir, resume)
        final = run_dir / "text_style.safetensors"
        result, report, model_cfg = model.last_run, [], asdict(model.cfg)
    elif cfg.stage == "style_extractor":
        text_ckpt = _require(inputs.get("text_ckpt"), "text_style", cfg.stage)
        manifest = Manifest.read(inputs["manifest"])
        text_model = load_text_style(text_ckpt)
        before = teacher_checksums(text_style=text_model)
        model = pretrain_style_extractor(manifest, text_model, cfg, build(ExtractorConfig, flat), run_dir, resume)
        report = verify_frozen(before, teacher_checksums(text_style=text_model), cfg.freeze)
        final = run_dir / "style_extractor.safetensors"
        result, model_cfg = model.last_run, asdict(model.cfg)
    else:
        text_ckpt = _require(inputs.get("text_ckpt"), "text_style", cfg.stage)
        ext_ckpt = _require(inputs.get("extractor_ckpt"), "style_extractor", cfg.stage)
        manifest = Manifest.read(inputs["manifest"])
        text_model = load_text_style(text_ckpt)
        extractor = load_style_extractor(ext_ckpt)
        model = train_tts(
            manifest, text_model, extractor, cfg, build(AcousticConfig, flat), run_dir, resume,
            feature_cfg.context_k, feature_cfg,
        )
        final = run_dir / "acoustic.safetensors"
        result, report, model_cfg = model.last_run, model.frozen_report, asdict(model.cfg)
        if final.exists():
            # the synthesis directory is self-contained: text encoder + acoustic model, no extractor
            shutil.copyfile(text_ckpt, run_dir / "text_style.safetensors")
    checkpoints = {tag: str(run_dir / f"{tag}.safetensors") for tag in ("last", "best") if (run_dir / f"{tag}.safetensors").exists()}
    if final.exists():
        checkpoints["final"] = str(final)
    run = RunManifest(
        stage=cfg.stage,
        config_hash=config_hash({"stage": asdict(cfg), "model": model_cfg}),
        checkpoints=checkpoints,
        loss_log=str(run_dir / LOSS_LOG),
        steps=result.steps,
        interrupted=result.interrupted,
        frozen_report=report,
        inputs={k: str(v) for k, v in inputs.items()},
    )
    run.write(run_dir / RUN_FILE)
    if report:
        logger.error("frozen components changed during training: %s", report)
    return run


def final_checkpoint(run: RunManifest) -> Path:
    if "final" not in run.checkpoints:
        raise CheckpointMissing(f"stage {run.stage} did not finish (interrupted={run.interrupted})")
    return Path(run.checkpoints["final"])
