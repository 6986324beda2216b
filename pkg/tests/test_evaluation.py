import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bookstyle.errors import NoVoicedOverlap, ShapeMismatch
from bookstyle.evaluation import (
    MCD_CONST,
    REPORT_COLUMNS,
    evaluate,
    f0_rmse,
    frames_to_seconds,
    mcd,
    mel_cepstrum,
    separability,
    tsne_projection,
)
from bookstyle.features import AcousticFeatures, write_feature_cache

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def dct_ortho_oracle(x):
    n = len(x)
    out = []
    for k in range(n):
        s = sum(x[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
        out.append(s * math.sqrt((1 if k == 0 else 2) / n))
    return out


def test_mel_cepstrum_oracle():
    mel = np.random.default_rng(0).standard_normal((3, 80))
    cep = mel_cepstrum(mel)
    assert cep.shape == (3, 13)
    for row, c in zip(mel, cep):
        np.testing.assert_allclose(c, dct_ortho_oracle(list(row))[1:14], atol=1e-10)


def test_mcd_drops_c0():
    mel = np.random.default_rng(1).standard_normal((6, 80))
    # a constant log-gain offset only moves c0
    assert mcd(mel_cepstrum(mel), mel_cepstrum(mel + 3.0)) == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.just(4)), elements=finite),
       arrays(np.float64, st.tuples(st.integers(1, 6), st.just(4)), elements=finite))
def test_mcd_properties(a, b):
    assert mcd(a, a) == 0.0
    d = mcd(a, b)
    assert d >= 0
    assert d == pytest.approx(mcd(b, a), rel=1e-9, abs=1e-9)


def test_mcd_time_stretch_is_free():
    a = np.random.default_rng(2).standard_normal((5, 13))
    assert mcd(np.repeat(a, 2, axis=0), a) == pytest.approx(0.0, abs=1e-12)


def test_mcd_errors():
    with pytest.raises(ShapeMismatch):
        mcd(np.zeros((0, 13)), np.zeros((2, 13)))
    with pytest.raises(ShapeMismatch):
        mcd(np.zeros((2, 12)), np.zeros((2, 13)))


def test_f0_rmse_edge_cases():
    with pytest.raises(NoVoicedOverlap):
        f0_rmse([0.0, 100.0], [100.0, 0.0])
    with pytest.raises(ShapeMismatch):
        f0_rmse([1.0], [1.0, 2.0])
    assert f0_rmse([100.0, 0.0, 130.0], [110.0, 90.0, 130.0]) == pytest.approx(math.sqrt(50.0))


def test_frames_to_seconds():
    np.testing.assert_allclose(frames_to_seconds([0, 1, 200]), [0.0, 0.015, 3.0])


def test_separability_oracle():
    rng = np.random.default_rng(0)
    e = rng.standard_normal((7, 3))
    lab = ["a", "b", "a", "a", "b", "b", "a"]
    intra, inter = [], []
    for i in range(7):
        for j in range(7):
            if i != j:
                (intra if lab[i] == lab[j] else inter).append(math.dist(e[i], e[j]))
    got = separability(e, lab)
    assert got[0] == pytest.approx(np.mean(intra), rel=1e-12)
    assert got[1] == pytest.approx(np.mean(inter), rel=1e-12)


def test_tsne_shape():
    e = np.random.default_rng(0).standard_normal((12, 5))
    assert tsne_projection(e).shape == (12, 2)
    assert tsne_projection(e[:2]).shape == (2, 2)


def test_perfect_predictions_score_zero(prepared, tmp_path):
    pred = tmp_path / "pred"
    pred.mkdir()
    for rec in prepared.split("test"):
        ref = prepared.features(rec.id)
        write_feature_cache(pred / f"{rec.id}.tf.styb", ref)
        write_feature_cache(pred / f"{rec.id}.free.styb", ref)
        (pred / f"{rec.id}.durations.json").write_text(json.dumps({"id": rec.id, "frames": rec.durations}))
    rows = evaluate(pred, prepared, tmp_path / "r.csv")
    assert rows[-1]["id"] == "mean"
    for row in rows:
        assert row["energy_rmse"] == 0.0 and row["duration_mse"] == 0.0 and row["mcd"] == 0.0
        assert row["f0_rmse"] == 0.0 or math.isnan(row["f0_rmse"])
    with open(tmp_path / "r.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert tuple(header) == REPORT_COLUMNS


def test_unvoiced_prediction_gives_nan_row(prepared, tmp_path):
    rec = prepared.split("test")[0]
    ref = prepared.features(rec.id)
    silent = AcousticFeatures(ref.mel, np.zeros_like(ref.f0), ref.energy)
    pred = tmp_path / "pred"
    pred.mkdir()
    for r in prepared.split("test"):
        write_feature_cache(pred / f"{r.id}.tf.styb", silent if r.id == rec.id else prepared.features(r.id))
        write_feature_cache(pred / f"{r.id}.free.styb", prepared.features(r.id))
        (pred / f"{r.id}.durations.json").write_text(json.dumps({"id": r.id, "frames": r.durations}))
    rows = evaluate(pred, prepared, tmp_path / "r.csv")
    assert math.isnan(rows[0]["f0_rmse"])
    assert math.isfinite(rows[-1]["f0_rmse"])


def test_pipeline_report_and_embeddings(pipeline):
    with open(pipeline["report"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    means = {c: float(rows[-1][c]) for c in REPORT_COLUMNS[1:]}
    for c in REPORT_COLUMNS[1:]:
        col = [float(r[c]) for r in rows[:-1]]
        assert means[c] == pytest.approx(np.nanmean(col), rel=1e-6)
    assert (pipeline["emb"] / "tsne.png").stat().st_size > 0
    with open(pipeline["emb"] / "tsne.csv", newline="") as fh:
        tsne = list(csv.reader(fh))
    assert tsne[0] == ["id", "label", "x", "y"] and len(tsne) == 51
    assert MCD_CONST == pytest.approx(6.1418, abs=1e-4)
