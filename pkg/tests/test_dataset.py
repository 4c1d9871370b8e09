import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debias.dataset import (
    CLASSES,
    SEAFLOOR,
    DatasetError,
    ImageSample,
    SynthSpec,
    augment,
    build_dataset,
    compute_norm_stats,
    generate_synthetic,
    load_dataset,
    manifest_dict,
    preprocess,
    save_dataset,
    split,
)


def mutual_information(xs, ys) -> float:
    n = len(xs)
    joint, px, py = {}, {}, {}
    for x, y in zip(xs, ys):
        joint[(x, y)] = joint.get((x, y), 0) + 1
        px[x] = px.get(x, 0) + 1
        py[y] = py.get(y, 0) + 1
    return sum(k / n * math.log(k * n / (px[x] * py[y])) for (x, y), k in joint.items())


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SynthSpec(n_per_class=6, seed=3))


def test_counts_and_full_confounding():
    samples = generate_synthetic(SynthSpec(n_per_class=500, image_size=32, bias_strength=1.0, seed=7))
    assert len(samples) == 2500
    assert [sum(s.label == c for s in samples) for c in range(5)] == [500] * 5
    ship = CLASSES.index("ship")
    assert all(s.texture_id == ship for s in samples if s.label == ship)
    # texture id predicts the label perfectly on object classes
    for s in samples:
        if s.label != SEAFLOOR:
            assert s.texture_id == s.label


def test_weak_bias_has_negligible_mutual_information():
    samples = generate_synthetic(SynthSpec(n_per_class=10, bias_strength=0.2, seed=1))
    mi = mutual_information([s.texture_id for s in samples], [s.label for s in samples])
    # frozen from the count-based oracle; the finite-sample null (independent
    # 5x5 table, n=50) has mean 0.19 nats and 99th percentile 0.36 nats
    assert mi == pytest.approx(0.3078564480149126, abs=1e-12)
    assert mi < 0.36
    big = generate_synthetic(SynthSpec(n_per_class=100, image_size=32, bias_strength=0.2, seed=1))
    assert mutual_information([s.texture_id for s in big], [s.label for s in big]) < 0.05
    full = generate_synthetic(SynthSpec(n_per_class=10, bias_strength=1.0, seed=1))
    assert mutual_information([s.texture_id for s in full], [s.label for s in full]) > 1.0


def test_generation_is_deterministic(tmp_path):
    spec = SynthSpec(n_per_class=3, seed=7)
    a = build_dataset(spec)
    b = build_dataset(SynthSpec(n_per_class=3, seed=7))
    for sa, sb in zip(a.samples, b.samples):
        assert sa.pixels.tobytes() == sb.pixels.tobytes()
    save_dataset(a, tmp_path / "a")
    save_dataset(b, tmp_path / "b")
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_sample_invariants(small):
    for s in small:
        assert s.pixels.shape == (224, 224, 1)
        assert s.pixels.min() >= 0 and s.pixels.max() <= 1
        assert s.object_mask.shape == (224, 224)
        if s.label == SEAFLOOR:
            assert not s.object_mask.any()
        else:
            assert s.object_mask.any()


def test_rejects_tiny_images():
    with pytest.raises(DatasetError):
        generate_synthetic(SynthSpec(n_per_class=1, image_size=16))


def test_small_images_are_resized_to_224():
    s = generate_synthetic(SynthSpec(n_per_class=1, image_size=48, seed=0))
    assert all(x.pixels.shape == (224, 224, 1) and x.object_mask.shape == (224, 224) for x in s)


def test_preprocess_constant_image():
    out = preprocess(np.full((100, 100), 0.5, dtype=np.float32))
    assert out.shape == (224, 224, 1)
    assert np.allclose(out, 0.5, atol=1e-7)


def test_preprocess_identity_resize_and_idempotence():
    rng = np.random.default_rng(0)
    img = rng.random((224, 224, 1)).astype(np.float32)
    out = preprocess(img)
    assert np.array_equal(out, img)
    u8 = (rng.random((90, 130)) * 255).astype(np.uint8)
    once = preprocess(u8)
    assert np.allclose(preprocess(once), once, atol=1e-7)


def test_preprocess_errors():
    with pytest.raises(DatasetError):
        preprocess(np.zeros((0, 10)))
    bad = np.ones((10, 10))
    bad[2, 2] = np.inf
    with pytest.raises(DatasetError):
        preprocess(bad)


def test_standardization_zero_mean_on_train():
    ds = build_dataset(SynthSpec(n_per_class=5, seed=2))
    train = np.stack([ds.norm.apply(s.pixels) for s in ds.subset("train")]).astype(np.float64)
    assert abs(train.mean()) < 1e-6
    assert train.std() == pytest.approx(1.0, abs=1e-5)
    direct = np.stack([s.pixels for s in ds.subset("train")]).astype(np.float64)
    assert ds.norm.mean[0] == pytest.approx(direct.mean(), abs=1e-12)


def test_flip_is_an_involution(small):
    s = small[0]
    flipped = np.flip(np.flip(s.pixels, axis=1), axis=1)
    assert np.array_equal(flipped, s.pixels)


def test_augment_seafloor_mask_stays_empty(small):
    sea = next(s for s in small if s.label == SEAFLOOR)
    out = augment(sea, np.random.default_rng(5))
    assert not out.object_mask.any()
    assert out.label == SEAFLOOR


def test_augment_is_deterministic(small):
    a = augment(small[1], np.random.default_rng(11))
    b = augment(small[1], np.random.default_rng(11))
    assert np.array_equal(a.pixels, b.pixels)
    assert np.array_equal(a.object_mask, b.object_mask)


def test_augment_keeps_mask_aligned_with_image():
    # an image whose bright pixels are exactly the mask: after the transform
    # the bright pixels must still coincide with the transformed mask
    pixels = np.full((224, 224, 1), 0.2, dtype=np.float32)
    mask = np.zeros((224, 224), dtype=bool)
    mask[60:120, 90:170] = True
    pixels[mask] = 1.0
    s = ImageSample(pixels=pixels, label=0, sample_id="x", object_mask=mask)
    for seed in range(5):
        out = augment(s, np.random.default_rng(seed))
        bright = out.pixels[..., 0] > 0.6
        agree = (bright == out.object_mask).mean()
        assert agree > 0.99
        assert out.label == 0


def _fake(counts):
    out = []
    for label, n in enumerate(counts):
        for i in range(n):
            out.append(ImageSample(pixels=np.zeros((2, 2, 1), np.float32), label=label, sample_id=f"{label}_{i}"))
    return out


def test_split_sizes_2500():
    sp = split(_fake([500] * 5), (0.7, 0.15, 0.15), seed=0)
    assert (len(sp.train), len(sp.val), len(sp.test)) == (1750, 375, 375)


def test_split_rejects_degenerate_ratios():
    with pytest.raises(DatasetError):
        split(_fake([10] * 5), (1.0, 0.0, 0.0))
    with pytest.raises(DatasetError):
        split(_fake([10] * 5), (0.7, 0.2, 0.2))


def test_split_rejects_tiny_class():
    with pytest.raises(DatasetError):
        split(_fake([10, 10, 2, 10, 10]), (0.7, 0.15, 0.15))


def test_split_ten_per_class():
    # largest-remainder rounding of (7, 1.5, 1.5): the leftover sample goes to
    # val or test, so the only admissible per-class sizes are these two
    admissible = {(7, 2, 1), (7, 1, 2)}
    samples = _fake([10] * 5)
    for seed in range(20):
        sp = split(samples, (0.7, 0.15, 0.15), seed=seed)
        for c in range(5):
            sizes = tuple(sum(sid.startswith(f"{c}_") for sid in part) for part in (sp.train, sp.val, sp.test))
            assert sizes in admissible
        assert not (set(sp.train) & set(sp.val) or set(sp.train) & set(sp.test) or set(sp.val) & set(sp.test))


def test_split_three_samples_fills_every_part():
    sp = split(_fake([3] * 5), (0.7, 0.15, 0.15), seed=1)
    assert len(sp.train) == len(sp.val) == len(sp.test) == 5


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), counts=st.lists(st.integers(4, 40), min_size=5, max_size=5))
def test_split_partitions_property(seed, counts):
    samples = _fake(counts)
    ratios = (0.7, 0.15, 0.15)
    sp = split(samples, ratios, seed=seed)
    parts = [set(sp.train), set(sp.val), set(sp.test)]
    assert sum(len(p) for p in parts) == len(samples)
    assert set().union(*parts) == {s.sample_id for s in samples}
    for c, n in enumerate(counts):
        for part, r in zip(parts, ratios):
            k = sum(sid.startswith(f"{c}_") for sid in part)
            assert abs(k - n * r) <= 1 + 1e-9
    assert split(samples, ratios, seed=seed) == sp


def test_manifest_round_trip(tmp_path):
    ds = build_dataset(SynthSpec(n_per_class=3, seed=4))
    save_dataset(ds, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert {"sample_id", "class", "texture_id", "path", "mask_path", "split"} <= set(man["samples"][0])
    assert man["normalization"]["mean"] == ds.norm.mean
    assert man["generator"]["seed"] == 4
    assert len(list((tmp_path / "ship").glob("*.png"))) == 3
    back = load_dataset(tmp_path)
    assert back.split == ds.split
    assert back.norm == ds.norm
    for a, b in zip(ds.samples, back.samples):
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.object_mask, b.object_mask)
        assert a.texture_id == b.texture_id
    assert manifest_dict(back) == manifest_dict(ds)


def test_norm_stats_guard_zero_std():
    flat = [ImageSample(pixels=np.full((4, 4, 1), 0.3, np.float32), label=0, sample_id="a")]
    stats = compute_norm_stats(flat)
    assert stats.std == [1.0]
