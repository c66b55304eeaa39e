import numpy as np
import pytest

from demixkit.audio import FeatureMatrix
from demixkit.autodiff import Tensor
from demixkit.corpus import CorpusManifest, Utterance
from demixkit.embedding import (
    MIN_FRAMES,
    Classifier,
    EmbeddingBank,
    Extractor,
    ExtractorConfig,
    SpeakerModel,
    StepOneConfig,
    build_bank,
    classify,
    evenly_spaced_windows,
    extract_embedding,
    train_step_one,
)
from demixkit.errors import DataError, SegmentTooShortError, ShapeError

TINY = ExtractorConfig(width=16, pool_width=24, embed_dim=12)


def table1_parameter_count():
    """Walk the published layer table by hand: (fan_in, fan_out, has_bn)."""
    rows = [(3 * 20, 512, True), (512, 512, True)]
    rows += [(5 * 512, 512, True), (512, 512, True)] * 3
    rows += [(512, 1500, True), (2 * 1500, 512, True), (512, 512, False)]
    return sum(i * o + o + (2 * o if bn else 0) for i, o, bn in rows)


def test_parameter_count_matches_table_walk():
    ex = Extractor(ExtractorConfig(), seed=0)
    assert ex.num_parameters() == table1_parameter_count() == 7_596_436
    widths = {k: v[1] for k, v in ex.config.layer_shapes().items()}
    assert widths["layer1"] == widths["layer2"] == widths["segment"] == widths["embedding"] == 512
    assert widths["layer3"] == 1500 and ex.config.layer_shapes()["segment"][0] == 3000
    assert "embedding" not in ex.bn
    assert {"embedding.gamma", "embedding.beta"}.isdisjoint(ex.params)


def test_classifier_shapes():
    clf = Classifier(20)
    assert clf.params["hidden.W"].shape == (512, 512)
    assert clf.params["output.W"].shape == (512, 20)


def test_minimum_length_is_fifteen_frames():
    ex = Extractor(TINY, seed=0)
    rng = np.random.default_rng(0)
    # layer 1 splices [t-1, t+1] (2 frames), each residual block [t-2, t+2] (4 frames)
    assert MIN_FRAMES == 1 + 2 + 3 * 4
    assert ex.frame_level(Tensor(rng.normal(size=(15, 20))), training=False).shape == (1, 24)
    assert ex.frame_level(Tensor(rng.normal(size=(40, 20))), training=False).shape == (26, 24)
    assert extract_embedding(ex, FeatureMatrix(rng.normal(size=(15, 20)))).shape == (12,)
    with pytest.raises(SegmentTooShortError):
        ex.embed(rng.normal(size=(14, 20)))


def test_eval_extraction_is_bitwise_deterministic():
    ex = Extractor(TINY, seed=3)
    f = np.random.default_rng(1).normal(size=(50, 20))
    assert np.array_equal(ex.embed(f), ex.embed(f))
    assert np.array_equal(Extractor(TINY, seed=3).embed(f), ex.embed(f))
    assert not np.array_equal(Extractor(TINY, seed=4).embed(f), ex.embed(f))


def test_window_embeddings_equal_cropped_extraction():
    ex = Extractor(TINY, seed=0)
    rng = np.random.default_rng(2)
    for st in ex.bn.values():
        st.running_mean = rng.normal(size=st.running_mean.shape)
        st.running_var = rng.uniform(0.5, 2.0, size=st.running_var.shape)
    f = rng.normal(size=(80, 20))
    windows = [(0, 30), (17, 40), (50, 30)]
    fast = ex.embed_windows(ex.frame_outputs(f), windows)
    slow = np.stack([ex.embed(f[s : s + n]) for s, n in windows])
    assert np.allclose(fast, slow, atol=1e-10, rtol=0)
    with pytest.raises(SegmentTooShortError):
        ex.embed_windows(ex.frame_outputs(f), [(60, 30)])


def test_residual_block_skip_identity():
    ex = Extractor(TINY, seed=0)
    for name in ("res1.conv5", "res1.conv1"):
        ex.params[f"{name}.W"].data[...] = 0.0
        ex.params[f"{name}.b"].data[...] = 0.0
        ex.params[f"{name}.gamma"].data[...] = 0.0
    x = np.abs(np.random.default_rng(0).normal(size=(12, 16)))
    out = ex.residual(Tensor(x), 1, training=False).data
    assert np.array_equal(out, x[2:-2])


def test_embedding_layer_is_affine_only():
    ex = Extractor(TINY, seed=0)
    pooled = np.random.default_rng(0).normal(size=(3, 48))
    ex.params["embedding.b"].data[...] = -100.0
    e = ex.segment_level(Tensor(pooled), training=False).data
    assert (e < 0).all()


def test_classify_is_a_distribution():
    clf = Classifier(5, embed_dim=12, hidden=8)
    e = np.random.default_rng(0).normal(size=12)
    p = classify(clf, e)
    assert p.shape == (5,) and (p >= 0).all() and abs(p.sum() - 1.0) < 1e-9
    clf.params["output.W"].data[...] = 0.0
    assert np.allclose(classify(clf, e), 0.2, atol=1e-15)
    with pytest.raises(ShapeError):
        classify(clf, np.zeros(11))


def test_classify_argmax_shift_invariant():
    clf = Classifier(5, embed_dim=12, hidden=8, seed=1)
    e = np.random.default_rng(4).normal(size=(6, 12))
    before = clf.predict(e)
    clf.params["output.b"].data[...] += 7.5
    assert np.array_equal(clf.predict(e), before)


def test_evenly_spaced_windows():
    assert evenly_spaced_windows(100, 40, 3) == [(0, 40), (30, 40), (60, 40)]
    assert evenly_spaced_windows(30, 40, 3) == [(0, 30)]


# ---------------------------------------------------------------- training


FAST = StepOneConfig(epochs=5, batch_size=16, crop_frames=60, holdout_crops=2, learning_rate=3e-3)
FAST_MODEL = ExtractorConfig(width=32, pool_width=48, embed_dim=32)


@pytest.fixture(scope="module")
def fast_run(small_corpus, small_features):
    return train_step_one(small_corpus, FAST, FAST_MODEL, small_features)


def test_step_one_loss_decreases_and_logs(fast_run):
    _, _, history = fast_run
    assert [h["epoch"] for h in history] == [1, 2, 3, 4, 5]
    assert history[-1]["loss"] < history[0]["loss"]
    assert all(0.0 <= h["holdout_accuracy"] <= 1.0 for h in history)


def test_step_one_seed_determinism(small_corpus, small_features, fast_run):
    cfg = StepOneConfig(epochs=2, batch_size=16, crop_frames=60, holdout_crops=2)
    a = train_step_one(small_corpus, cfg, FAST_MODEL, small_features)
    b = train_step_one(small_corpus, cfg, FAST_MODEL, small_features)
    assert a[2] == b[2]
    for (k, x), (_, y) in zip(a[0].named_parameters().items(), b[0].named_parameters().items()):
        assert np.array_equal(x.data, y.data), k


def test_step_one_zero_epochs_returns_initial_model(small_corpus, small_features):
    model, _, history = train_step_one(small_corpus, StepOneConfig(epochs=0), FAST_MODEL, small_features)
    fresh = SpeakerModel.create(20, FAST_MODEL, 0)
    assert history == []
    for k, t in fresh.named_parameters().items():
        assert np.array_equal(model.named_parameters()[k].data, t.data)


def test_step_one_probe_mode(small_corpus, small_features):
    cfg = StepOneConfig(epochs=1, batch_size=16, crop_frames=60, holdout_crops=2, classifier_mode="probe", probe_epochs=2)
    _, _, history = train_step_one(small_corpus, cfg, FAST_MODEL, small_features)
    assert history[-1]["epoch"] == "probe"


def test_step_one_requires_train_split():
    m = CorpusManifest([Utterance("a", "s", "a.wav", "test")])
    with pytest.raises(DataError):
        train_step_one(m, FAST, FAST_MODEL, {})


# ---------------------------------------------------------------- bank


def test_bank_is_seed_deterministic_and_covers_speakers(small_corpus, small_features, fast_run):
    ex = fast_run[0].extractor
    a = build_bank(ex, small_corpus, small_features, segments_per_speaker=10, crop_frames=60, seed=1)
    b = build_bank(ex, small_corpus, small_features, segments_per_speaker=10, crop_frames=60, seed=1)
    c = build_bank(ex, small_corpus, small_features, segments_per_speaker=10, crop_frames=60, seed=2)
    assert a.speakers == small_corpus.speakers
    assert np.array_equal(a.vectors, b.vectors)
    assert not np.array_equal(a.vectors, c.vectors)
    assert a.provenance == {"segments_per_speaker": 10, "crop_frames": 60, "seed": 1}


def test_bank_entry_is_mean_of_segment_embeddings(small_corpus, small_features, fast_run):
    ex = fast_run[0].extractor
    # a one-utterance speaker whose crops all cover the whole utterance: every segment is identical
    utt = small_corpus.split("train")[0]
    m = CorpusManifest([utt, Utterance("other", "spk999", utt.path, "train")], root=small_corpus.root)
    feats = {utt.utterance_id: small_features[utt.utterance_id][:60], "other": small_features[utt.utterance_id][:60]}
    bank = build_bank(ex, m, feats, segments_per_speaker=7, crop_frames=60, seed=0)
    single = ex.embed(feats[utt.utterance_id])
    assert np.allclose(bank[utt.speaker_id], single, atol=1e-12, rtol=0)


def test_bank_errors():
    bank = EmbeddingBank(["a"], np.ones((1, 3)))
    assert np.array_equal(bank["a"], np.ones(3)) and "b" not in bank
    with pytest.raises(DataError, match="missing"):
        bank["b"]
    with pytest.raises(ShapeError):
        EmbeddingBank(["a", "b"], np.ones((1, 3)))
