import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hmae.corpus import (CorpusError, CorpusManifest, ManifestRow, SizeDistribution, SlideImage,
                         fit_size_distribution, generate_corpus, load_slides, quality_check,
                         read_roi_sizes, resize_bilinear, sample_crop, split_counts, stratified_split,
                         stratified_split_labels)
from hmae.synthetic import blank_with_texture, noise_slide, write_slides
from hmae.vit import GeometryError


def fake_slide(h, w, slide_id="s"):
    return SlideImage(np.broadcast_to(np.zeros(1, dtype=np.uint8), (h, w, 3)), slide_id)


# -- size distribution -------------------------------------------------------------
def test_fit_constant_sides():
    d = fit_size_distribution([100, 100, 100])
    assert d.mu == 100 and d.sigma == 0


def test_fit_two_sides_hand_formula():
    d = fit_size_distribution([100, 200])
    assert d.mu == 150
    assert d.sigma == pytest.approx(math.sqrt(((100 - 150) ** 2 + (200 - 150) ** 2) / 1), rel=1e-12)
    assert d.sigma == pytest.approx(70.71, abs=0.01)


def test_fit_clamps_use_percentiles_and_patch_floor():
    sides = list(range(10, 1010))
    d = fit_size_distribution(sides, patch_size=16)
    assert d.clamp_min == math.ceil(max(32, np.percentile(sides, 1)))
    assert d.clamp_max == math.floor(np.percentile(sides, 99))
    assert fit_size_distribution([5, 6, 7], patch_size=16).clamp_min <= 6


def test_fit_needs_two_samples():
    with pytest.raises(ValueError):
        fit_size_distribution([100])


def test_fit_monte_carlo_round_trip():
    draws = np.random.default_rng(0).normal(300.0, 40.0, size=10_000)
    d = fit_size_distribution(draws)
    resampled = np.random.default_rng(1).normal(d.mu, d.sigma, size=10_000)
    assert abs(resampled.mean() - d.mu) / d.mu < 0.02
    assert abs(resampled.std(ddof=1) - d.sigma) / d.sigma < 0.02
    assert abs(d.mu - 300) / 300 < 0.02 and abs(d.sigma - 40) / 40 < 0.02


def test_read_roi_sizes(tmp_path):
    p = tmp_path / "sizes.csv"
    p.write_text("side\n120\n\n340.5\n")
    assert read_roi_sizes(p) == [120.0, 340.5]


def test_size_distribution_validation():
    with pytest.raises(ValueError):
        SizeDistribution(100, -1, 50, 200)
    with pytest.raises(ValueError):
        SizeDistribution(40, 1, 50, 200)


# -- sample_crop ---------------------------------------------------------------------
def test_sample_crop_sigma_zero():
    dist = SizeDistribution(100, 0, 64, 512)
    gen = np.random.default_rng(0)
    assert {sample_crop(fake_slide(300, 400), dist, gen).side for _ in range(50)} == {100}


def test_sample_crop_exact_fit_forces_origin():
    c = sample_crop(fake_slide(100, 100), SizeDistribution(100, 0, 64, 512), 3)
    assert (c.x, c.y, c.side) == (0, 0, 100)


def test_sample_crop_deterministic_and_small_slide_error():
    dist = SizeDistribution()
    assert sample_crop(fake_slide(600, 600), dist, 9) == sample_crop(fake_slide(600, 600), dist, 9)
    with pytest.raises(GeometryError):
        sample_crop(fake_slide(50, 600), dist, 0)


def test_sample_crop_side_distribution_ks():
    dist = SizeDistribution(256, 64, 200, 320)
    gen = np.random.default_rng(0)
    slide = fake_slide(700, 700)
    sides = np.array([sample_crop(slide, dist, gen).side for _ in range(10_000)], dtype=np.float64)
    assert sides.min() >= 200 and sides.max() <= 320
    a, b = (200 - 256) / 64, (320 - 256) / 64
    # integer sides: undo the rounding with a uniform dither before comparing CDFs
    jittered = sides + np.random.default_rng(1).uniform(-0.5, 0.5, size=sides.size)
    res = stats.kstest(jittered, stats.truncnorm(a, b, loc=256, scale=64).cdf)
    assert res.pvalue > 0.01, res


def test_sample_crop_fuzz_bounds():
    gen = np.random.default_rng(2)
    dist = SizeDistribution(256, 128, 64, 512)
    for _ in range(200):
        h, w = int(gen.integers(64, 1500)), int(gen.integers(64, 1500))
        slide = fake_slide(h, w)
        for _ in range(500):
            c = sample_crop(slide, dist, gen)
            assert 0 <= c.x and 0 <= c.y and c.x + c.side <= w and c.y + c.side <= h
            assert dist.clamp_min <= c.side <= dist.clamp_max


# -- quality ---------------------------------------------------------------------------
def test_quality_constant_white_rejected():
    q = quality_check(np.full((32, 32, 3), 255, dtype=np.uint8))
    assert q.cv == 0 and not q.accepted


def test_quality_all_black_degenerate():
    q = quality_check(np.zeros((32, 32, 3), dtype=np.uint8))
    assert not q.accepted and q.degenerate and q.cv == math.inf


def test_quality_checkerboard():
    img = np.zeros((32, 32, 3), dtype=np.uint8)
    img[(np.add.outer(np.arange(32), np.arange(32)) % 2) == 0] = 255
    q = quality_check(img, 0.1)
    assert q.cv == pytest.approx(1.0, abs=1e-12) and q.accepted


def test_quality_cv_loop_oracle():
    img = np.random.default_rng(3).integers(0, 256, size=(20, 17, 3), dtype=np.uint8)
    vals = [0.299 * float(p[0]) + 0.587 * float(p[1]) + 0.114 * float(p[2]) for row in img for p in row]
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / len(vals)
    assert quality_check(img).cv == pytest.approx(math.sqrt(var) / mean, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 255))
def test_quality_constant_crops_always_rejected(v):
    assert not quality_check(np.full((8, 8, 3), v, dtype=np.uint8), 0.0).accepted


# -- resize -------------------------------------------------------------------------------
def bilinear_oracle(src, oh, ow):
    h, w = src.shape[:2]
    out = np.zeros((oh, ow) + src.shape[2:])
    for i in range(oh):
        sy = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1, fy = min(y0 + 1, h - 1), sy - math.floor(sy)
        for j in range(ow):
            sx = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1, fx = min(x0 + 1, w - 1), sx - math.floor(sx)
            top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
            bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def test_resize_identity_bit_exact():
    img = np.random.default_rng(0).integers(0, 256, size=(9, 9, 3), dtype=np.uint8)
    out = resize_bilinear(img, 9)
    assert out.tobytes() == img.tobytes() and out is not img


def test_resize_constant():
    out = resize_bilinear(np.full((7, 5, 3), 0.3), (11, 13))
    np.testing.assert_allclose(out, 0.3, atol=1e-12)


def test_resize_gradient_2x2_to_4x4():
    src = np.array([[[0.0], [1.0]], [[2.0], [3.0]]])
    out = resize_bilinear(src, 4)
    np.testing.assert_allclose(out, bilinear_oracle(src, 4, 4), atol=1e-6)
    np.testing.assert_allclose(out[0, :, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-6)


@pytest.mark.parametrize("shape,target", [((13, 7, 3), (5, 9)), ((6, 6, 3), (17, 17)), ((20, 20), (8, 3))])
def test_resize_random_vs_oracle(shape, target):
    src = np.random.default_rng(1).random(shape)
    np.testing.assert_allclose(resize_bilinear(src, target), bilinear_oracle(src, *target), atol=1e-9)


def test_resize_errors():
    with pytest.raises(GeometryError):
        resize_bilinear(np.zeros((4, 4, 3)), 1)
    with pytest.raises(GeometryError):
        resize_bilinear(np.zeros((1, 4, 3)), 4)


# -- generation ------------------------------------------------------------------------------
def test_generate_count_zero(tmp_path):
    with pytest.raises(ValueError):
        generate_corpus([noise_slide(128, 128, 0)], SizeDistribution(64, 8, 32, 96), 0, 0.05, 0, tmp_path)


def test_generate_noise_acceptance(tmp_path):
    m = generate_corpus([noise_slide(256, 256, 0)], SizeDistribution(64, 8, 32, 96), 50, 0.05, 0, tmp_path,
                        input_size=32)
    assert m.acceptance_rate > 0.99 and len(m) == 50


def test_generate_outputs_and_invariants(tmp_path):
    slide, _ = blank_with_texture(300, 300, 0.3, 0)
    m = generate_corpus([slide], SizeDistribution(64, 16, 32, 128), 12, 0.1, 5, tmp_path, input_size=24)
    assert [r.id for r in m.rows] == sorted(r.id for r in m.rows)
    for r in m.rows:
        assert r.cv > 0.1
        assert m.load_image(r).shape == (24, 24, 3)
    text = (tmp_path / "manifest.csv").read_bytes()
    assert text.startswith(b"id,path,slide,x,y,side,cv,label,split\n") and b"\r" not in text
    again = CorpusManifest.read(tmp_path / "manifest.csv")
    assert again.rows == m.rows


def test_generate_budget_exhausted(tmp_path):
    white = SlideImage(np.full((128, 128, 3), 255, dtype=np.uint8), "white")
    with pytest.raises(CorpusError, match="acceptance rate 0.0000"):
        generate_corpus([white], SizeDistribution(64, 8, 32, 96), 2, 0.1, 0, tmp_path, input_size=16)


def test_generate_byte_identical_and_worker_independent(tmp_path):
    slides = [noise_slide(200, 200, 1, "a"), blank_with_texture(200, 200, 0.2, 2, "b")[0]]
    dist = SizeDistribution(64, 16, 32, 128)
    outs = []
    for name, workers in (("w1a", 1), ("w1b", 1), ("w2", 2)):
        generate_corpus(slides, dist, 15, 0.1, 3, tmp_path / name, input_size=16, workers=workers, chunk=8)
        outs.append(tmp_path / name)
    m = [(o / "manifest.csv").read_bytes() for o in outs]
    assert m[0] == m[1] == m[2]
    for f in sorted((outs[0] / "images").iterdir()):
        assert f.read_bytes() == (outs[1] / "images" / f.name).read_bytes() == (outs[2] / "images" / f.name).read_bytes()


def test_load_slides(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_slides(tmp_path / "missing")
    with pytest.raises(FileNotFoundError):
        load_slides(tmp_path)
    write_slides([noise_slide(40, 50, 0, "n0")], tmp_path)
    (s,) = load_slides(tmp_path)
    assert (s.height, s.width, s.slide_id) == (40, 50, "n0")


def test_manifest_rejects_duplicate_ids(tmp_path):
    rows = [ManifestRow("a", "x.png", "s", 0, 0, 8, 0.5)] * 2
    with pytest.raises(ValueError):
        CorpusManifest(rows, root=tmp_path)
    CorpusManifest(rows, root=tmp_path, unique_ids=False)


# -- splitting ---------------------------------------------------------------------------------
def test_split_single_class_100():
    tags = stratified_split_labels(["a"] * 100, rng=0)
    assert (tags.count("train"), tags.count("val"), tags.count("test")) == (70, 10, 20)


def test_split_ten_per_class():
    labels = ["a"] * 10 + ["b"] * 10 + ["c"] * 10
    tags = stratified_split_labels(labels, rng=1)
    for c in "abc":
        sub = [t for l, t in zip(labels, tags) if l == c]
        assert (sub.count("train"), sub.count("val"), sub.count("test")) == (7, 1, 2)


def test_split_deterministic_and_errors():
    labels = list("aaabbbb")
    assert stratified_split_labels(labels, rng=4) == stratified_split_labels(labels, rng=4)
    with pytest.raises(ValueError):
        stratified_split_labels(list("aab"), rng=0)
    with pytest.raises(ValueError):
        stratified_split_labels(list("aaa"), fractions=(0.5, 0.5, 0.5))


def test_split_counts_largest_remainder():
    assert split_counts(7, (0.7, 0.1, 0.2)) == [5, 1, 1]  # quotas 4.9, .7, 1.4
    assert split_counts(3, (0.7, 0.1, 0.2)) == [2, 0, 1]  # quotas 2.1, .3, .6
    assert sum(split_counts(1234, (0.7, 0.1, 0.2))) == 1234


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=0, max_size=120), st.integers(0, 2 ** 31))
def test_split_partition_property(raw, seed):
    labels = raw + [c for c in range(6) for _ in range(3)]
    tags = stratified_split_labels(labels, rng=seed)
    assert all(t in ("train", "val", "test") for t in tags)
    for c in set(labels):
        sub = [t for l, t in zip(labels, tags) if l == c]
        n = len(sub)
        for name, f in zip(("train", "val", "test"), (0.7, 0.1, 0.2)):
            assert abs(sub.count(name) - f * n) < 1


def test_stratified_split_rows():
    rows = [ManifestRow(f"r{i}", "p", "s", 0, 0, 8, 0.5, label="ab"[i % 2]) for i in range(20)]
    out = stratified_split(rows, rng=0)
    assert [r.id for r in out] == [r.id for r in rows]
    assert all(r.split is not None for r in out)
    with pytest.raises(ValueError):
        stratified_split(rows + [ManifestRow("u", "p", "s", 0, 0, 8, 0.5)])
