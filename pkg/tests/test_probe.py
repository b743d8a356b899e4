import numpy as np
import pytest

from conftest import tiny_config
from hmae.metrics import confusion, f1_scores
from hmae.probe import (BRACS_CLASSES, EmbeddingRecord, LabelMapping, Probe, ProbeConfig, coarsen_labels,
                        embed_region, predict, region_tiles, tile_origins, train_probe, train_probe_records)
from hmae.tensor import ShapeError, parameters_checksum
from hmae.vit import GeometryError, MaeModel


@pytest.fixture(scope="module")
def model():
    return MaeModel(tiny_config(), seed=0)


def _img(h, w, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)


# -- embedding -------------------------------------------------------------------------
def test_tile_origins():
    assert tile_origins(16, 16) == [0]
    assert tile_origins(32, 16) == [0, 16]
    assert tile_origins(40, 16) == [0, 16, 24]


def test_embed_single_tile_is_patch_token_mean(model):
    img = _img(16, 16)
    vec = embed_region(model, img)
    assert vec.shape == (model.config.encoder_dim,) and vec.dtype == np.float32
    tiles = region_tiles(img, 16, 4)
    out = model.forward_encoder(tiles.reshape(1, 4, 4, 4, 4, 3).transpose(0, 1, 3, 2, 4, 5).reshape(1, 16, 48),
                                np.arange(16)[None]).data[0]
    np.testing.assert_allclose(vec, out[1:].mean(axis=0), atol=1e-6)


def test_embed_identical_regions_bit_exact(model):
    a, b = _img(40, 24, 1), _img(40, 24, 1)
    assert embed_region(model, a).tobytes() == embed_region(model, b).tobytes()


def test_embed_duplicated_tile_equals_single_tile(model):
    a = _img(16, 16, 2)
    both = np.concatenate([a, a], axis=1)
    np.testing.assert_allclose(embed_region(model, both), embed_region(model, a), atol=1e-6)


def test_embed_tile_permutation_invariance(model):
    a, b = _img(16, 16, 3), _img(16, 16, 4)
    ab = np.concatenate([a, b], axis=0)
    ba = np.concatenate([b, a], axis=0)
    np.testing.assert_allclose(embed_region(model, ab), embed_region(model, ba), atol=1e-6)


def test_embed_small_region_resized_and_degenerate_rejected(model):
    assert embed_region(model, _img(12, 30)).shape == (16,)
    with pytest.raises(GeometryError):
        embed_region(model, _img(7, 30))
    assert embed_region(model, _img(50, 50), mode="resize").shape == (16,)
    with pytest.raises(ValueError):
        embed_region(model, _img(16, 16), mode="bogus")


def test_embed_does_not_touch_weights(model):
    before = parameters_checksum(model.parameters())
    embed_region(model, _img(32, 32))
    assert parameters_checksum(model.parameters()) == before


# -- label mapping ------------------------------------------------------------------------
def test_default_coarse_map_cardinality():
    m = LabelMapping.bracs()
    recs = [EmbeddingRecord(str(i), np.zeros(2), i) for i in range(7)]
    out, coarse = coarsen_labels(recs, m)
    assert len({r.label for r in out}) == 3
    assert coarse.classes == ["benign", "atypical", "malignant"]
    assert [coarse.classes[r.label] for r in out] == ["benign"] * 3 + ["atypical"] * 2 + ["malignant"] * 2


def test_identity_coarse_map():
    m = LabelMapping(["a", "b", "c"], {"a": "a", "b": "b", "c": "c"}, ["a", "b", "c"])
    recs = [EmbeddingRecord(str(i), np.ones(2), i % 3, "train") for i in range(9)]
    out, _ = coarsen_labels(recs, m)
    assert [(r.id, r.label, r.split) for r in out] == [(r.id, r.label, r.split) for r in recs]


def test_coarse_counts_are_sums_of_fine_counts():
    rng = np.random.default_rng(0)
    fine = rng.integers(0, 7, size=500)
    recs = [EmbeddingRecord(str(i), np.zeros(1), int(l)) for i, l in enumerate(fine)]
    out, coarse = coarsen_labels(recs, LabelMapping.bracs())
    counts = np.bincount([r.label for r in out], minlength=3)
    fc = np.bincount(fine, minlength=7)
    assert counts.tolist() == [fc[0] + fc[1] + fc[2], fc[3] + fc[4], fc[5] + fc[6]]


def test_mapping_errors():
    with pytest.raises(ValueError):
        LabelMapping(["a", "a"])
    with pytest.raises(ValueError):
        LabelMapping(["a", "b"], {"a": "x"})
    with pytest.raises(ValueError):
        coarsen_labels([EmbeddingRecord("r", np.zeros(1), 9)], LabelMapping.bracs())
    with pytest.raises(ValueError):
        coarsen_labels([], LabelMapping(list(BRACS_CLASSES)))


# -- probes --------------------------------------------------------------------------------
def separable(n_per_class=100, n_classes=2, dim=8, sep=10.0, seed=0):
    means = np.random.default_rng(1000 + n_classes).normal(size=(n_classes, dim))
    rng = np.random.default_rng(seed)
    means *= sep / np.linalg.norm(means[0] - means[-1])
    X = np.concatenate([rng.normal(means[c], 1.0, size=(n_per_class, dim)) for c in range(n_classes)])
    y = np.repeat(np.arange(n_classes), n_per_class)
    return X.astype(np.float32), y


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_probe_separable(kind):
    X, y = separable()
    Xv, yv = separable(seed=1)
    cfg = ProbeConfig(kind=kind, hidden_dim=32, epochs=20, seed=0)
    probe = train_probe(X, y, 2, cfg, Xv, yv)
    _, pred = predict(probe, Xv)
    assert f1_scores(confusion(yv, pred, 2)).macro >= 0.99
    assert (pred == yv).mean() >= 0.99


def test_probe_shuffled_labels_chance_level():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(900, 8)).astype(np.float32)
    y = rng.permutation(np.repeat(np.arange(3), 300))
    Xv = rng.normal(size=(900, 8)).astype(np.float32)
    yv = rng.permutation(np.repeat(np.arange(3), 300))
    probe = train_probe(X, y, 3, ProbeConfig(kind="linear", epochs=10, seed=0))
    _, pred = predict(probe, Xv)
    assert abs(f1_scores(confusion(yv, pred, 3)).macro - 1 / 3) <= 0.1


def test_probe_deterministic():
    X, y = separable(n_classes=3)
    cfg = ProbeConfig(hidden_dim=16, epochs=5, seed=3)
    a, b = train_probe(X, y, 3, cfg, X, y), train_probe(X, y, 3, cfg, X, y)
    for p, q in zip(a.state(), b.state()):
        assert p.tobytes() == q.tobytes()


def test_predict_zero_weights_uniform():
    probe = Probe(4, 5, ProbeConfig(kind="linear"))
    for p in probe.parameters():
        p.data[...] = 0
    probs, pred = predict(probe, np.random.default_rng(0).normal(size=(6, 4)))
    np.testing.assert_allclose(probs, 0.2, atol=1e-7)
    assert (pred == 0).all()  # ties -> lowest index


def test_predict_rows_are_distributions():
    probe = Probe(4, 3, ProbeConfig(hidden_dim=8))
    X = np.random.default_rng(1).normal(0, 1e3, size=(50, 4))
    probs, _ = predict(probe, X)
    assert (probs >= 0).all()
    np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-6)
    with pytest.raises(ShapeError):
        predict(probe, np.zeros((2, 5)))


def test_probe_errors():
    with pytest.raises(ValueError):
        train_probe(np.zeros((4, 2)), [1, 1, 1, 1], 2, ProbeConfig())
    with pytest.raises(ValueError):
        ProbeConfig(kind="mlp", hidden_dim=0).validate()
    with pytest.raises(ValueError):
        ProbeConfig(kind="svm").validate()


def test_train_probe_records_uses_split_tags():
    X, y = separable(n_per_class=30)
    tags = ["train"] * 20 + ["val"] * 10
    recs = [EmbeddingRecord(str(i), X[i], int(y[i]), tags[i % 30]) for i in range(len(y))]
    probe = train_probe_records(recs, 2, ProbeConfig(kind="linear", epochs=100))
    _, pred = predict(probe, X)
    assert (pred == y).mean() >= 0.99


def test_probe_training_leaves_encoder_untouched(model):
    before = parameters_checksum(model.parameters())
    X = np.stack([embed_region(model, _img(16, 16, s)) for s in range(12)])
    y = np.arange(12) % 2
    train_probe(X, y, 2, ProbeConfig(epochs=3))
    assert parameters_checksum(model.parameters()) == before
