import json
import time
from pathlib import Path

import pytest
import torch

from bookstyle import cli
from bookstyle.config import TextStyleConfig
from bookstyle.corpus import Manifest, prepare_data
from bookstyle.fixture import make_fixture
from bookstyle.text_style import Tokenizer, TextStyleModel


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    return make_fixture(tmp_path_factory.mktemp("fixture"))


@pytest.fixture(scope="session")
def prepared(fixture_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("prepared")
    prepare_data(fixture_dir / "corpus", out)
    return Manifest.read(out / "manifest.jsonl")


@pytest.fixture
def tiny_text_model():
    torch.manual_seed(0)
    corpus = ["tom cried sadly", "ann laughed happily", "the dog shouted angrily", "eve sighed softly"] * 2
    cfg = TextStyleConfig(d_style=16, text_d_model=16, text_layers=1, text_heads=2, text_ff=32, n_clusters=2)
    return TextStyleModel(cfg, Tokenizer.build(corpus)).eval()


def _cli(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"bookstyle {argv[0]} exited with {code}"


@pytest.fixture(scope="session")
def pipeline(fixture_dir, tmp_path_factory):
    """The full CLI chain on the synthetic fixture, run once per session."""
    fx = fixture_dir
    root = tmp_path_factory.mktemp("pipeline")
    paths = {
        "fixture": fx,
        "data": root / "data",
        "text_ckpt": root / "ckpt" / "text_style.safetensors",
        "extractor_ckpt": root / "ckpt" / "style_extractor.safetensors",
        "tts": root / "tts",
        "para": root / "para",
        "pred": root / "pred",
        "report": root / "report.csv",
        "emb": root / "emb",
        "codes": root / "codes",
    }
    manifest = paths["data"] / "manifest.jsonl"
    timings = {}

    def timed(name, *argv):
        t0 = time.perf_counter()
        _cli(*argv)
        timings[name] = time.perf_counter() - t0

    timed("prepare-data", "prepare-data", "--corpus", fx / "corpus", "--out", paths["data"], "--config", fx / "tts.yaml")
    timed(
        "pretrain-style-encoder", "pretrain-style-encoder", "--text", fx / "text_corpus.txt", "--lexicon",
        fx / "lexicon.json", "--out", paths["text_ckpt"], "--config", fx / "text_style.yaml",
    )
    timed(
        "pretrain-style-extractor", "pretrain-style-extractor", "--manifest", manifest, "--text-ckpt",
        paths["text_ckpt"], "--out", paths["extractor_ckpt"], "--config", fx / "style_extractor.yaml",
    )
    timed(
        "train-tts", "train-tts", "--manifest", manifest, "--text-ckpt", paths["text_ckpt"], "--extractor-ckpt",
        paths["extractor_ckpt"], "--config", fx / "tts.yaml", "--out", paths["tts"],
    )
    timed("synthesize-paragraph", "synthesize-paragraph", "--sentences", fx / "paragraph.txt", "--ckpt-dir", paths["tts"], "--out-dir", paths["para"])
    timed("predict", "predict", "--ckpt-dir", paths["tts"], "--manifest", manifest, "--out", paths["pred"])
    timed("evaluate", "evaluate", "--pred-dir", paths["pred"], "--ref-manifest", manifest, "--out", paths["report"])
    timed(
        "export-embeddings", "export-embeddings", "--ckpt", paths["extractor_ckpt"], "--manifest", manifest,
        "--labels", fx / "labels.json", "--out", paths["emb"],
    )
    timed("export-codes", "export-codes", "--ckpt", paths["extractor_ckpt"], "--manifest", manifest, "--out", paths["codes"])
    paths["manifest"] = manifest
    paths["timings"] = timings
    (root / "timings.json").write_text(json.dumps(timings, indent=1))
    return paths


def run_dir(ckpt: Path) -> Path:
    return ckpt.parent / f"{ckpt.stem}_run"


def read_jsonl(path: Path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
