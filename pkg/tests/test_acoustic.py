import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from bookstyle.acoustic import (
    AcousticModel,
    StyleDecoder,
    acoustic_losses,
    check_frozen,
    durations_from_log,
    forward_infer,
    forward_train,
    style_loss,
)
from bookstyle.config import AcousticConfig
from bookstyle.errors import BadWindow, FrozenContractViolation, MissingTargets, ShapeMismatch, UnknownPhoneme
from bookstyle.layers import length_regulate_batch, padding_mask
from test_acceptance import small_acoustic, toy_batch


def targets(batch):
    return {k: batch[k] for k in ("durations", "pitch", "energy")}


def test_output_shapes():
    model = small_acoustic().eval()
    b = toy_batch(model)
    out = model(b["ids"], b["h_s"], b["h_cs"], b["src_lengths"], targets(b))
    t = int(b["durations"].sum(1).max())
    assert out.mel.shape == (2, t, 10)
    assert out.h_sd.shape == out.h_s_frame.shape == (2, t, 16)
    assert out.attn.shape == (2, 2, t, 5)
    assert out.mel_lengths.tolist() == [9, 8]
    assert out.dur_pred.shape == out.pitch_pred.shape == (2, 5)


def test_padding_is_silent():
    model = small_acoustic().eval()
    b = toy_batch(model)
    out = model(b["ids"], b["h_s"], b["h_cs"], b["src_lengths"], targets(b))
    assert torch.all(out.mel[1, 8:] == 0)
    assert torch.all(out.durations[1, 4:] == 0)


def test_padding_does_not_leak():
    """The shorter utterance is unchanged by what sits in the padded slot."""
    model = small_acoustic().eval()
    b = toy_batch(model)
    a = model(b["ids"], b["h_s"], b["h_cs"], b["src_lengths"], targets(b))
    ids = b["ids"].clone()
    ids[1, 4] = 11
    c = model(ids, b["h_s"], b["h_cs"], b["src_lengths"], targets(b))
    torch.testing.assert_close(a.mel[1, :8], c.mel[1, :8], atol=1e-5, rtol=0)


def test_training_mode_needs_targets():
    model = small_acoustic().train()
    b = toy_batch(model)
    with pytest.raises(MissingTargets):
        model(b["ids"], b["h_s"], b["h_cs"], b["src_lengths"])


def test_unknown_phoneme():
    model = small_acoustic().eval()
    b = toy_batch(model)
    with pytest.raises(UnknownPhoneme):
        model(b["ids"] + 20, b["h_s"], b["h_cs"], b["src_lengths"], targets(b))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 60), min_size=1, max_size=10))
def test_duration_inverse(durs):
    log_d = torch.log(torch.tensor(durs, dtype=torch.float64) + 1.0)
    back = durations_from_log(log_d)
    assert back.tolist() == [max(1, d) for d in durs]


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 6))
def test_duration_rounding(x):
    d = int(durations_from_log(torch.tensor([x], dtype=torch.float64))[0])
    assert d == max(1, math.floor(math.exp(x) - 1 + 0.5))


def test_duration_mask():
    mask = torch.tensor([[False, True]])
    assert durations_from_log(torch.tensor([[2.0, 2.0]]), mask).tolist() == [[6, 0]]


def test_free_running_uses_predicted_durations():
    model = small_acoustic().eval()
    b = toy_batch(model)
    out = model(b["ids"], b["h_s"], b["h_cs"], b["src_lengths"])
    expected = durations_from_log(out.dur_pred, out.src_mask)
    assert torch.equal(out.durations, expected)
    assert out.mel_lengths.tolist() == expected.sum(1).tolist()


def test_decoder_injection_starts_at_zero():
    model = small_acoustic().eval()
    b = toy_batch(model)
    args = (b["ids"], b["h_s"], b["h_cs"], b["src_lengths"], targets(b))
    out = model(*args)
    plain, _ = model.mel_decoder(out.h_p_frame, None, out.mel_mask)
    torch.testing.assert_close(out.mel, plain.masked_fill(out.mel_mask[..., None], 0.0))


def test_style_path_reaches_mel_once_injection_is_learned():
    model = small_acoustic().eval()
    for lin in model.mel_decoder.inject:
        torch.nn.init.normal_(lin.weight)
    b = toy_batch(model)
    a = model(b["ids"], b["h_s"], b["h_cs"], b["src_lengths"], targets(b))
    c = model(b["ids"], b["h_s"] + 1, b["h_cs"], b["src_lengths"], targets(b))
    assert torch.equal(a.h_p_frame, c.h_p_frame)
    assert not torch.allclose(a.mel, c.mel)


def test_pitch_energy_feed_style_branch_only():
    model = small_acoustic().eval()
    b = toy_batch(model)
    a = model(b["ids"], b["h_s"], b["h_cs"], b["src_lengths"], targets(b))
    t2 = dict(targets(b), pitch=b["pitch"] + 2.0, energy=b["energy"] - 1.0)
    c = model(b["ids"], b["h_s"], b["h_cs"], b["src_lengths"], t2)
    assert torch.equal(a.h_p_frame, c.h_p_frame)
    assert not torch.equal(a.h_s_frame, c.h_s_frame)


def test_h_s_frame_definition():
    """H_s' is the length-regulated sum of H_s and the prosody embeddings."""
    model = small_acoustic().eval()
    b = toy_batch(model)
    out = model(b["ids"], b["h_s"], b["h_cs"], b["src_lengths"], targets(b))
    ph = b["h_s"][:, None, :] + model.variance_adaptor.embed(b["pitch"], b["energy"])
    want, _ = length_regulate_batch(ph, b["durations"], padding_mask(b["src_lengths"], 5))
    assert torch.equal(out.h_s_frame, want)


def test_style_decoder_respects_context_mask():
    torch.manual_seed(0)
    cfg = AcousticConfig(d_model=8, d_style=8, style_dec_heads=2)
    dec = StyleDecoder(cfg).eval()
    q, ctx = torch.randn(1, 4, 8), torch.randn(1, 5, 8)
    mask = torch.tensor([[False, False, False, True, True]])
    out, w = dec(q, ctx, context_mask=mask)
    assert torch.all(w[..., 3:] == 0)
    ctx2 = ctx.clone()
    ctx2[:, 3:] = 99.0
    assert torch.equal(out, dec(q, ctx2, context_mask=mask)[0])


def test_style_loss_oracle():
    a, b = torch.randn(2, 3, 4), torch.randn(2, 3, 4)
    mask = torch.tensor([[False, False, True], [False, False, False]])
    keep = [(0, 0), (0, 1), (1, 0), (1, 1), (1, 2)]
    want = sum(float(((a[i, j] - b[i, j]) ** 2).sum()) for i, j in keep) / (len(keep) * 4)
    assert style_loss(a, b, mask).item() == pytest.approx(want, rel=1e-6)
    with pytest.raises(ShapeMismatch):
        style_loss(a, b[:, :2])


def test_loss_terms_oracle():
    model = small_acoustic().eval()
    b = toy_batch(model)
    losses = forward_train(model, b)
    out = losses["output"]
    keep = ~out.src_mask
    dur = ((out.dur_pred - torch.log(b["durations"].float() + 1)) ** 2)[keep].mean()
    pitch = ((out.pitch_pred - b["pitch"]) ** 2)[keep].mean()
    frames = ~out.mel_mask
    mel = (out.mel - b["mel"]).abs()[frames].mean()
    torch.testing.assert_close(losses["dur"], dur)
    torch.testing.assert_close(losses["pitch"], pitch)
    torch.testing.assert_close(losses["mel"], mel)


def test_mel_target_length_checked():
    model = small_acoustic().eval()
    b = toy_batch(model)
    out = model(b["ids"], b["h_s"], b["h_cs"], b["src_lengths"], targets(b))
    with pytest.raises(ShapeMismatch):
        acoustic_losses(out, dict(b, mel=b["mel"][:, :-1]))


def test_check_frozen(tiny_text_model):
    with pytest.raises(FrozenContractViolation):
        check_frozen(text_style=tiny_text_model)
    check_frozen(text_style=tiny_text_model.freeze(), style_extractor=None)


def test_forward_infer(tiny_text_model):
    torch.manual_seed(0)
    model = small_acoustic()
    text = tiny_text_model.freeze()
    out = forward_infer(model, [1, 2, 3], ["", "tom cried", "ann laughed"], text)
    assert out.mel.shape[0] == 1 and out.mel.shape[1] == int(out.durations.sum())
    assert torch.all(out.durations >= 1)
    with pytest.raises(BadWindow):
        forward_infer(model, [1, 2], ["a", "b"], text)


def test_no_style_decoder_wiring():
    model = small_acoustic("no_style_decoder").eval()
    b = toy_batch(model)
    out = model(b["ids"], b["h_s"], b["h_cs"], b["src_lengths"], targets(b))
    assert out.attn is None
    assert torch.equal(out.h_sd, out.h_s_frame)
    want, _ = model.mel_decoder(out.h_p_frame + out.h_s_frame, None, out.mel_mask)
    assert torch.equal(out.mel, want.masked_fill(out.mel_mask[..., None], 0.0))


def test_default_group_sizes():
    model = AcousticModel(AcousticConfig(), n_symbols=40)
    counts = model.group_param_counts()
    d, k = 256, 5
    attention = 4 * (d * d + d)
    convs = 2 * (d * d * k + d)
    assert counts["style_decoder"] == attention + convs + 2 * 2 * d + (d * d + d)
    assert counts["style_proj"] == d * d + d
    assert counts["mel_decoder"] > 0 and counts["phoneme_encoder"] > counts["style_decoder"]


def test_deterministic_under_seed():
    a = small_acoustic(seed=5)
    b = small_acoustic(seed=5)
    for (n1, p1), (n2, p2) in zip(a.state_dict().items(), b.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    np.testing.assert_array_equal(
        forward_train(a.eval(), toy_batch(a))["total"].detach().numpy(),
        forward_train(b.eval(), toy_batch(b))["total"].detach().numpy(),
    )
