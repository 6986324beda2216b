"""Command-line entry point: ``bookstyle <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional

from .config import FeatureConfig, StageConfig, build, check_keys, load_flat
from .corpus import Manifest, iter_texts, prepare_data
from .errors import BookstyleError, CheckpointMissing
from .evaluation import evaluate, export_style_embeddings
from .fixture import make_fixture
from .synthesis import Synthesizer, predict_manifest
from .text_style import load_text_style
from .training import RUN_FILE, RunManifest, final_checkpoint, run_stage
from .vqvae import export_codes, load_style_extractor

logger = logging.getLogger("bookstyle")


def _flat(args) -> dict:
    flat = load_flat(getattr(args, "config", None))
    check_keys(flat)
    return flat


def _stage_cfg(stage: str, flat: dict, **overrides) -> StageConfig:
    return build(StageConfig, flat, stage=stage, **overrides)


def _run_dir_for(ckpt: Path) -> Path:
    return ckpt.parent / f"{ckpt.stem}_run"


def _publish(run: RunManifest, out: Path) -> None:
    """Copy the stage's final checkpoint to the requested path."""
    src = final_checkpoint(run)
    out.parent.mkdir(parents=True, exist_ok=True)
    if src.resolve() != out.resolve():
        shutil.copyfile(src, out)


def _text_ckpt_for(ckpt: Path, explicit: Optional[str]) -> Path:
    """Text encoder paired with an extractor: explicit, else recorded in its run.json."""
    if explicit:
        return Path(explicit)
    for run_file in (_run_dir_for(ckpt) / RUN_FILE, ckpt.parent / RUN_FILE):
        if run_file.exists():
            text = RunManifest.read(run_file).inputs.get("text_ckpt")
            if text:
                return Path(text)
    raise CheckpointMissing(f"cannot find the text style checkpoint paired with {ckpt}; pass --text-ckpt")


def cmd_make_fixture(args) -> None:
    out = make_fixture(args.out, args.utterances, seed=args.seed)
    print(out)


def cmd_prepare_data(args) -> None:
    flat = _flat(args)
    manifest = prepare_data(args.corpus, args.out, build(FeatureConfig, flat), workers=args.workers)
    print(f"{len(manifest)} utterances -> {Path(args.out) / 'manifest.jsonl'}")


def cmd_pretrain_style_encoder(args) -> None:
    flat = _flat(args)
    out = Path(args.out)
    cfg = _stage_cfg("text_style", flat, **_loop_overrides(args))
    run = run_stage(cfg, {"run_dir": _run_dir_for(out), "text": args.text, "lexicon": args.lexicon}, flat, not args.fresh)
    if not run.interrupted:
        _publish(run, out)
    print(json.dumps({"checkpoint": str(out), "steps": run.steps, "interrupted": run.interrupted}))


def cmd_pretrain_style_extractor(args) -> None:
    flat = _flat(args)
    out = Path(args.out)
    cfg = _stage_cfg("style_extractor", flat, **_loop_overrides(args))
    inputs = {"run_dir": _run_dir_for(out), "manifest": args.manifest, "text_ckpt": args.text_ckpt}
    run = run_stage(cfg, inputs, flat, not args.fresh)
    if not run.interrupted:
        _publish(run, out)
    print(json.dumps({"checkpoint": str(out), "steps": run.steps, "interrupted": run.interrupted, "frozen_report": run.frozen_report}))


def cmd_export_codes(args) -> None:
    ckpt = Path(args.ckpt)
    model = load_style_extractor(ckpt)
    text_model = load_text_style(_text_ckpt_for(ckpt, args.text_ckpt))
    paths = export_codes(model, Manifest.read(args.manifest), text_model, args.out)
    print(f"{len(paths)} code files -> {args.out}")


def cmd_train_tts(args) -> None:
    flat = _flat(args)
    overrides = _loop_overrides(args)
    if args.ablation:
        overrides["ablation"] = args.ablation
    cfg = _stage_cfg("tts", flat, **overrides)
    inputs = {
        "run_dir": args.out,
        "manifest": args.manifest,
        "text_ckpt": args.text_ckpt,
        "extractor_ckpt": args.extractor_ckpt,
    }
    run = run_stage(cfg, inputs, flat, not args.fresh)
    print(json.dumps({"run_dir": args.out, "steps": run.steps, "interrupted": run.interrupted, "frozen_report": run.frozen_report}))
    if run.frozen_report:
        raise BookstyleError(f"frozen components changed: {run.frozen_report}")


def cmd_predict(args) -> None:
    synth = Synthesizer.load(args.ckpt_dir, seed=args.seed)
    ids = predict_manifest(synth, Manifest.read(args.manifest), args.out, args.split)
    print(f"{len(ids)} predictions -> {args.out}")


def _read_context(path: Optional[str]):
    if not path:
        return None
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, list):
        return data
    if not isinstance(data, dict):
        raise BookstyleError(f"{path}: context must be a JSON object with 'past'/'future' lists or a list")
    return data


def cmd_synthesize(args) -> None:
    synth = Synthesizer.load(args.ckpt_dir, vocoder_cmd=args.vocoder_cmd, seed=args.seed)
    print(synth.synthesize(args.text, _read_context(args.context), args.out))


def cmd_synthesize_paragraph(args) -> None:
    synth = Synthesizer.load(args.ckpt_dir, vocoder_cmd=args.vocoder_cmd, seed=args.seed)
    paths = synth.synthesize_paragraph(list(iter_texts(args.sentences)), args.out_dir, concatenate=not args.no_concat)
    for p in paths:
        print(p)


def cmd_evaluate(args) -> None:
    flat = _flat(args)
    rows = evaluate(args.pred_dir, Manifest.read(args.ref_manifest), args.out, args.split, build(FeatureConfig, flat))
    if rows:
        print(json.dumps(rows[-1]))


def cmd_export_embeddings(args) -> None:
    ckpt = Path(args.ckpt)
    model = load_style_extractor(ckpt)
    text_model = load_text_style(_text_ckpt_for(ckpt, args.text_ckpt))
    labels = json.loads(Path(args.labels).read_text()) if args.labels else None
    result = export_style_embeddings(model, Manifest.read(args.manifest), text_model, args.out, labels, args.seed)
    summary = {"rows": len(result["ids"]), "out": args.out}
    if "intra" in result:
        summary.update(intra=result["intra"], inter=result["inter"])
    print(json.dumps(summary))


def _loop_overrides(args) -> dict:
    out = {}
    if getattr(args, "max_steps", None):
        out["max_steps"] = args.max_steps
    return out


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat YAML config")
    p.add_argument("--fresh", action="store_true", help="ignore any resume state in the run directory")
    p.add_argument("--max-steps", type=int, default=0, help="stop (resumably) after this many steps")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bookstyle", description="Expressive long-form TTS toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("make-fixture", help="write the synthetic two-regime corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--utterances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="ignored; accepted for uniformity")
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("prepare-data", help="extract features and write the manifest")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("pretrain-style-encoder", help="stage i: text style encoder")
    p.add_argument("--text", required=True)
    p.add_argument("--lexicon")
    p.add_argument("--out", required=True)
    _training_flags(p)
    p.set_defaults(func=cmd_pretrain_style_encoder)

    p = sub.add_parser("pretrain-style-extractor", help="stage ii: VQ-VAE style extractor")
    p.add_argument("--manifest", required=True)
    p.add_argument("--text-ckpt", required=True)
    p.add_argument("--out", required=True)
    _training_flags(p)
    p.set_defaults(func=cmd_pretrain_style_extractor)

    p = sub.add_parser("export-codes", help="dump per-utterance code indices as JSON")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--text-ckpt")
    p.add_argument("--config")
    p.set_defaults(func=cmd_export_codes)

    p = sub.add_parser("train-tts", help="stage iii: acoustic model with frozen teachers")
    p.add_argument("--manifest", required=True)
    p.add_argument("--text-ckpt", required=True)
    p.add_argument("--extractor-ckpt", required=True)
    p.add_argument("--out", required=True, help="run directory; also the synthesis checkpoint directory")
    p.add_argument("--ablation", choices=["none", "no_style_encoder", "no_style_decoder", "no_style_extractor"])
    _training_flags(p)
    p.set_defaults(func=cmd_train_tts)

    p = sub.add_parser("predict", help="write teacher-forced and free-running predictions for evaluation")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_predict)

    for name, fn in (("synthesize", cmd_synthesize), ("synthesize-paragraph", cmd_synthesize_paragraph)):
        p = sub.add_parser(name)
        if name == "synthesize":
            p.add_argument("--text", required=True)
            p.add_argument("--context", help='JSON file: {"past": [...], "future": [...]}')
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--sentences", required=True, help="one sentence per line")
            p.add_argument("--out-dir", required=True)
            p.add_argument("--no-concat", action="store_true")
        p.add_argument("--ckpt-dir", required=True)
        p.add_argument("--vocoder-cmd", help="external vocoder: called with <mel.styb> <out.wav>")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config")
        p.set_defaults(func=fn)

    p = sub.add_parser("evaluate", help="objective metrics report")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--ref-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-embeddings", help="utterance style embeddings + t-SNE plot")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels")
    p.add_argument("--out", required=True)
    p.add_argument("--text-ckpt")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except BookstyleError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
