import json

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from bookstyle.config import StageConfig, TextStyleConfig
from bookstyle.corpus import iter_texts
from bookstyle.errors import BadWindow, ContrastiveBatchTooSmall, EmptyCorpus
from bookstyle.text_style import (
    EmotionLexicon,
    Tokenizer,
    augment_positive,
    clustering_loss,
    contrastive_loss,
    encode_context,
    encode_style,
    load_text_style,
    pretrain_style_encoder,
    save_text_style,
    soft_assignment,
    target_distribution,
)
from conftest import read_jsonl, run_dir

LEX = EmotionLexicon({"cried": ["wept"], "wept": ["cried"], "happy": ["glad", "joyful"], "glad": ["happy"], "joyful": ["happy"]})


# ---------------------------------------------------------------- augmentation


def test_augment_example():
    out = augment_positive(EmotionLexicon({"cried": ["wept"]}), "she cried sadly", 7)
    assert out == ("she wept sadly", "augmented")
    assert augment_positive(EmotionLexicon({"cried": ["wept"]}), "she cried sadly", 7) == out


def test_augment_no_lexicon_word():
    assert augment_positive(LEX, "the table is brown", 3) == ("the table is brown", "no_augmentation")


def test_augment_keeps_case_and_punctuation():
    text, flag = augment_positive(LEX, "Cried, she did.", 0)
    assert flag == "augmented" and text == "Wept, she did."


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["she", "cried", "happy", "the", "glad", "dog", "wept", "joyful"]), min_size=1, max_size=10), st.integers(0, 10**6))
def test_augment_changes_at_most_one_token(words, seed):
    text = " ".join(words)
    out, flag = augment_positive(LEX, text, seed)
    before, after = text.split(" "), out.split(" ")
    assert len(before) == len(after)
    changed = sum(a != b for a, b in zip(before, after))
    assert changed == (1 if flag == "augmented" else 0)
    for a, b in zip(before, after):
        if a != b:
            assert b in LEX.entries[a]


def test_lexicon_closure(tmp_path):
    path = tmp_path / "lex.json"
    path.write_text(json.dumps({"cried": ["wept"]}))
    with pytest.raises(ValueError):
        EmotionLexicon.load(path)
    assert not EmotionLexicon.load(path, require_closed=False).is_closed()


def test_fixture_lexicon_is_closed(fixture_dir):
    assert EmotionLexicon.load(fixture_dir / "lexicon.json").is_closed()


# ---------------------------------------------------------------- model


def test_output_width_and_null(tiny_text_model):
    m = tiny_text_model
    for text in ["", "tom cried sadly", "zzz unseen words", "x" * 500]:
        v = encode_style(m, text)
        assert v.shape == (16,) and torch.isfinite(v).all()
    assert torch.equal(encode_style(m, ""), m.null_embedding.detach())
    assert torch.equal(encode_style(m, ""), encode_style(m, ""))


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.text(max_size=40))
def test_any_unicode_is_finite(tiny_text_model, text):
    assert torch.isfinite(encode_style(tiny_text_model, text)).all()


def test_eval_determinism(tiny_text_model):
    a, b = encode_style(tiny_text_model, "ann laughed"), encode_style(tiny_text_model, "ann laughed")
    assert F.cosine_similarity(a, b, dim=0).item() == pytest.approx(1.0)
    assert torch.equal(a, b)


def test_encode_context(tiny_text_model):
    m = tiny_text_model
    window = ["tom cried sadly", "", "ann laughed happily", "eve sighed softly", "the dog"]
    h = encode_context(m, window)
    assert h.shape == (5, 16)
    for i, t in enumerate(window):
        assert torch.equal(h[i], encode_style(m, t))
    perm = [3, 0, 4, 1, 2]
    assert torch.equal(encode_context(m, [window[i] for i in perm]), h[perm])
    assert torch.equal(encode_context(m, ["ann"]), encode_style(m, "ann")[None])
    nulls = encode_context(m, [""] * 5)
    assert all(torch.equal(nulls[0], r) for r in nulls)
    with pytest.raises(BadWindow):
        encode_context(m, ["a", "b"])


def test_frozen_stays_in_eval(tiny_text_model):
    m = tiny_text_model.freeze()
    m.train()
    assert not m.training
    assert not any(p.requires_grad for p in m.parameters())


def test_checkpoint_roundtrip(tiny_text_model, tmp_path):
    save_text_style(tmp_path / "t.safetensors", tiny_text_model)
    back = load_text_style(tmp_path / "t.safetensors")
    assert back.frozen
    # compare like with like: a frozen encoder takes the fused inference kernels
    assert torch.equal(encode_style(back, "tom cried"), encode_style(tiny_text_model.freeze(), "tom cried"))


def test_tokenizer_roundtrip():
    tok = Tokenizer.build(["a b c", "a b"], min_count=1)
    assert Tokenizer.from_json(tok.to_json()).encode("a b c") == tok.encode("a b c")


# ---------------------------------------------------------------- losses


def test_contrastive_loss_oracle():
    g = torch.Generator().manual_seed(0)
    a, p = torch.randn(4, 6, generator=g), torch.randn(4, 6, generator=g)
    tau = 0.1
    an = a / a.norm(dim=1, keepdim=True)
    pn = p / p.norm(dim=1, keepdim=True)
    sims = (an @ pn.T).tolist()
    rows = [-np.log(np.exp(sims[i][i] / tau) / sum(np.exp(s / tau) for s in sims[i])) for i in range(4)]
    cols = [-np.log(np.exp(sims[j][j] / tau) / sum(np.exp(sims[i][j] / tau) for i in range(4))) for j in range(4)]
    expected = 0.5 * (np.mean(rows) + np.mean(cols))
    assert contrastive_loss(a, p, tau).item() == pytest.approx(expected, rel=1e-5)


def test_contrastive_needs_two():
    with pytest.raises(ContrastiveBatchTooSmall):
        contrastive_loss(torch.randn(1, 3), torch.randn(1, 3), 0.1)


def test_soft_assignment_rows_sum_to_one():
    z, c = torch.randn(7, 3), torch.randn(4, 3)
    q = soft_assignment(z, c)
    torch.testing.assert_close(q.sum(1), torch.ones(7))
    p = target_distribution(q)
    torch.testing.assert_close(p.sum(1), torch.ones(7))
    # one cluster: assignments are all 1 and the loss is exactly zero
    assert clustering_loss(z, c[:1]).item() == pytest.approx(0.0, abs=1e-7)


# ---------------------------------------------------------------- training


def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        pretrain_style_encoder(["  ", ""], StageConfig(stage="text_style"))


def test_batch_of_one():
    with pytest.raises(ContrastiveBatchTooSmall):
        pretrain_style_encoder(["a b", "c d"], StageConfig(stage="text_style", batch_size=1))


def test_short_run_with_one_cluster(tmp_path):
    corpus = [f"{n} cried near the {w}" for n in ("tom", "ann", "eve", "sam") for w in ("dog", "tree", "wall")]
    cfg = StageConfig(stage="text_style", batch_size=4, phase1_epochs=2, phase2_epochs=1, warmup_steps=5, seed=3)
    mcfg = TextStyleConfig(d_style=8, text_d_model=16, text_layers=1, text_heads=2, text_ff=16, n_clusters=1)
    model = pretrain_style_encoder(corpus, cfg, mcfg, LEX, tmp_path)
    epochs = read_jsonl(tmp_path / "epochs.jsonl")
    assert [e["phase"] for e in epochs] == ["contrastive", "contrastive", "joint"]
    assert np.isfinite(epochs[-1]["total"])
    assert (tmp_path / "text_style.safetensors").exists()
    assert (tmp_path / "loss_curve.png").exists()
    assert model.d_style == 8


def test_fixture_phase1_monotone(pipeline):
    epochs = read_jsonl(run_dir(pipeline["text_ckpt"]) / "epochs.jsonl")
    phase1 = [e["contrastive"] for e in epochs if e["phase"] == "contrastive"]
    assert len(phase1) >= 2
    assert all(b < a for a, b in zip(phase1, phase1[1:])), phase1
    assert all(np.isfinite(e["total"]) for e in epochs if e["phase"] == "joint")


def test_positive_beats_random_texts(pipeline):
    model = load_text_style(pipeline["text_ckpt"])
    fx = pipeline["fixture"]
    lexicon = EmotionLexicon.load(fx / "lexicon.json")
    corpus = list(dict.fromkeys(iter_texts(fx / "text_corpus.txt")))
    rng = np.random.default_rng(0)
    wins, trials = 0, 0
    with torch.no_grad():
        emb = F.normalize(model(corpus)[0], dim=-1)
        for i in rng.choice(len(corpus), size=40, replace=False):
            pos, flag = augment_positive(lexicon, corpus[i], int(rng.integers(1 << 30)))
            if flag != "augmented":
                continue
            p = F.normalize(model([pos])[0][0], dim=0)
            others = rng.choice([j for j in range(len(corpus)) if j != i], size=31, replace=False)
            trials += 1
            wins += float(emb[i] @ p) > float((emb[others] @ emb[i]).mean())
    assert trials >= 10
    assert wins == trials
