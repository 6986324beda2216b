import json
import subprocess
import sys
import wave

import pytest

from bookstyle import cli
from conftest import read_jsonl

VERBS = [
    "make-fixture", "prepare-data", "pretrain-style-encoder", "pretrain-style-extractor", "export-codes",
    "train-tts", "predict", "synthesize", "synthesize-paragraph", "evaluate", "export-embeddings",
]


@pytest.mark.parametrize("verb", VERBS)
def test_help(verb, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([verb, "--help"])
    assert exc.value.code == 0
    assert "usage: bookstyle" in capsys.readouterr().out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "bookstyle", "--help"], capture_output=True, text=True, check=True)
    assert "train-tts" in out.stdout


def test_make_fixture(tmp_path, capsys):
    assert cli.main(["make-fixture", "--out", str(tmp_path / "fx"), "--utterances", "6"]) == 0
    fx = tmp_path / "fx"
    for name in ("text_corpus.txt", "lexicon.json", "labels.json", "paragraph.txt", "tts.yaml"):
        assert (fx / name).exists()
    assert len(read_jsonl(fx / "corpus" / "utterances.jsonl")) == 6


def test_stage_order_error_exit_code(pipeline, tmp_path, capsys):
    code = cli.main([
        "train-tts", "--manifest", str(pipeline["manifest"]), "--text-ckpt", str(pipeline["text_ckpt"]),
        "--extractor-ckpt", str(tmp_path / "missing.safetensors"), "--out", str(tmp_path / "tts"),
    ])
    assert code == 2
    assert "StageOrderViolation" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("not_a_key: 1\n")
    assert cli.main(["prepare-data", "--corpus", str(tmp_path), "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 2
    assert "ConfigError" in capsys.readouterr().err


def test_synthesize_with_context(pipeline, tmp_path):
    ctx = tmp_path / "ctx.json"
    ctx.write_text(json.dumps({"past": ["she wept"], "future": ["he laughed"]}))
    out = tmp_path / "s.wav"
    assert cli.main(["synthesize", "--text", "tom cried", "--context", str(ctx), "--ckpt-dir", str(pipeline["tts"]), "--out", str(out)]) == 0
    with wave.open(str(out)) as w:
        assert w.getframerate() == 16000 and w.getnframes() > 0
    assert out.with_suffix(".styb").exists()


def test_export_needs_paired_text_checkpoint(pipeline, tmp_path, capsys):
    lone = tmp_path / "lone" / "ext.safetensors"
    lone.parent.mkdir()
    lone.write_bytes(pipeline["extractor_ckpt"].read_bytes())
    code = cli.main(["export-codes", "--ckpt", str(lone), "--manifest", str(pipeline["manifest"]), "--out", str(tmp_path / "c")])
    assert code == 2
    assert "--text-ckpt" in capsys.readouterr().err


def test_ablation_flag_and_max_steps(pipeline, tmp_path, capsys):
    out = tmp_path / "abl"
    fx = pipeline["fixture"]
    argv = [
        "train-tts", "--manifest", str(pipeline["manifest"]), "--text-ckpt", str(pipeline["text_ckpt"]),
        "--extractor-ckpt", str(pipeline["extractor_ckpt"]), "--config", str(fx / "tts.yaml"),
        "--out", str(out), "--ablation", "no_style_extractor", "--max-steps", "2",
    ]
    assert cli.main(argv) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["steps"] == 2 and summary["interrupted"]
    rows = read_jsonl(out / "losses.jsonl")
    assert len(rows) == 2
    assert all(r["total"] == r["tts"] for r in rows)
