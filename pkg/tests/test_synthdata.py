"""Synthetic domains, augmentation and dataset files."""
from dataclasses import replace

import numpy as np
import pytest

from app.errors import ConfigError, DataFormatError
from app.synthdata import (BLOB_DIM, DATASET_MAGIC, GLYPH_SIZE, SPLIT_TEST, AugmentPolicy, DomainData, augment,
                           base_samples, generate_domain, get_suite, load_suite, make_views, read_csv,
                           read_dataset, render_glyph, write_csv, write_dataset)


def domain(suite, name, n):
    return replace(get_suite(suite).domain(name), n_samples=n)


# --- generation ---

def test_generation_is_deterministic():
    spec = domain("digits5", "rotated", 30)
    a, b = generate_domain(spec, seed=3), generate_domain(spec, seed=3)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    c = generate_domain(spec, seed=4)
    assert not np.array_equal(a.x, c.x)


def test_test_split_differs_from_train():
    spec = domain("blobs3", "plain", 40)
    assert not np.array_equal(generate_domain(spec, 0).x, generate_domain(spec, 0, split=SPLIT_TEST).x)


def test_identity_domain_equals_base_samples():
    for suite, name in (("blobs3", "plain"), ("digits5", "clean")):
        spec = domain(suite, name, 25)
        assert spec.is_identity
        x, y = base_samples(spec, seed=1)
        data = generate_domain(spec, seed=1)
        assert np.array_equal(data.x, x) and np.array_equal(data.y, y)


def test_labels_are_stratified():
    data = generate_domain(domain("digits5", "inverted", 103), seed=0)
    counts = data.class_counts()
    assert counts.sum() == 103
    assert counts.max() - counts.min() <= 1


def test_blob_class_means():
    data = generate_domain(domain("blobs3", "plain", 2000), seed=0)
    for c in range(4):
        mean = data.x[data.y == c].mean(axis=0)
        expected = np.zeros(BLOB_DIM)
        expected[c] = 3.0
        assert np.allclose(mean, expected, atol=0.25)


def test_values_round_trip_through_float32():
    data = generate_domain(domain("blobs3", "warped", 20), seed=2)
    assert np.array_equal(data.x, data.x.astype(np.float32).astype(np.float64))


def test_digit_transforms_stay_in_range():
    for name in get_suite("digits5").names:
        data = generate_domain(domain("digits5", name, 20), seed=0)
        assert data.x.shape == (20, GLYPH_SIZE * GLYPH_SIZE)
        assert data.x.min() >= 0.0 and data.x.max() <= 1.0 + 1e-6


def test_inverted_domain_flips_the_base():
    clean = generate_domain(domain("digits5", "clean", 10), seed=0)
    spec = domain("digits5", "inverted", 10)
    x, _ = base_samples(spec, seed=0)
    inverted = generate_domain(spec, seed=0)
    assert np.allclose(inverted.x, 1.0 - x, atol=1e-7)
    assert clean.x.mean() < inverted.x.mean()


def test_render_glyph():
    img = render_glyph(8)
    assert img.size == (GLYPH_SIZE, GLYPH_SIZE) and img.mode == "L"
    lit_eight = np.count_nonzero(np.asarray(render_glyph(8)))
    lit_one = np.count_nonzero(np.asarray(render_glyph(1)))
    assert lit_eight > lit_one > 0


def test_load_suite_defaults():
    data = load_suite("blobs3", seed=0, n_per_domain=12, n_test=8)
    assert data.target.name == "warped"
    assert [s.name for s in data.sources] == ["plain", "tilted"]
    assert len(data.target) == 12 and len(data.target_test) == 8


def test_load_suite_rejects_bad_domains():
    with pytest.raises(ConfigError):
        load_suite("blobs3", seed=0, target="plain", sources=["plain"])
    with pytest.raises(ConfigError):
        load_suite("nope", seed=0)
    with pytest.raises(ConfigError):
        load_suite("blobs3", seed=0, target="missing")


# --- augmentation ---

def test_augment_is_deterministic(rng):
    x = rng.random(GLYPH_SIZE * GLYPH_SIZE)
    policy = get_suite("digits5").strong
    a = augment(x, policy, 5, (GLYPH_SIZE, GLYPH_SIZE))
    b = augment(x, policy, 5, (GLYPH_SIZE, GLYPH_SIZE))
    assert np.array_equal(a, b)


def test_zero_noise_weak_view_is_a_shift():
    img = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
    img[5:9, 6:10] = 1.0
    policy = AugmentPolicy("weak", flip_prob=0.0, max_shift=1)
    out = augment(img.reshape(-1), policy, 0, (GLYPH_SIZE, GLYPH_SIZE)).reshape(GLYPH_SIZE, GLYPH_SIZE)
    assert out.sum() == img.sum()
    rows, cols = np.nonzero(out)
    assert abs(rows.min() - 5) <= 1 and abs(cols.min() - 6) <= 1


def test_flip_rate_follows_the_policy():
    img = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
    img[:, 0] = 1.0
    policy = AugmentPolicy("weak", flip_prob=0.5, max_shift=0)
    rng = np.random.default_rng(0)
    flipped = [augment(img.reshape(-1), policy, rng, (GLYPH_SIZE, GLYPH_SIZE)).reshape(img.shape)[0, -1] == 1.0
               for _ in range(2000)]
    assert np.mean(flipped) == pytest.approx(0.5, abs=0.05)


def test_glyph_suites_do_not_mirror():
    suite = get_suite("digits5")
    assert suite.weak.flip_prob == 0.0 and suite.strong.flip_prob == 0.0


def test_zero_jitter_vector_view_is_identity(rng):
    x = rng.standard_normal(BLOB_DIM)
    assert np.array_equal(augment(x, AugmentPolicy("weak", jitter=0.0), 0), x)


def test_strong_views_differ(rng):
    suite = get_suite("digits5")
    x = generate_domain(domain("digits5", "clean", 4), 0).x
    q, k = make_views(x, suite.weak, suite.strong, rng, target=True, image_shape=(GLYPH_SIZE, GLYPH_SIZE))
    assert q.shape == k.shape == x.shape
    assert not np.array_equal(q, k)


def test_unknown_policy_kind():
    with pytest.raises(ConfigError):
        AugmentPolicy("medium")


# --- dataset files ---

def test_dataset_round_trip(tmp_path):
    data = generate_domain(domain("digits5", "noisy_bg", 15), seed=0)
    path = str(tmp_path / "noisy_bg.tclds")
    write_dataset(path, data)
    loaded = read_dataset(path, expected_dim=data.dim, spec=data.spec)
    assert np.array_equal(loaded.x, data.x) and np.array_equal(loaded.y, data.y)
    assert loaded.domain_id == data.domain_id


def test_empty_dataset_is_legal(tmp_path):
    spec = domain("blobs3", "plain", 0)
    data = DomainData(spec=spec, x=np.zeros((0, BLOB_DIM)), y=np.zeros(0, dtype=np.int64))
    path = str(tmp_path / "empty.tclds")
    write_dataset(path, data)
    assert len(read_dataset(path)) == 0


def test_corrupted_header_is_rejected(tmp_path):
    path = tmp_path / "bad.tclds"
    write_dataset(str(path), generate_domain(domain("blobs3", "plain", 5), 0))
    raw = path.read_bytes()
    path.write_bytes(b"XXXXX" + raw[len(DATASET_MAGIC):])
    with pytest.raises(DataFormatError, match="magic"):
        read_dataset(str(path))
    path.write_bytes(raw[:9])
    with pytest.raises(DataFormatError, match="truncated"):
        read_dataset(str(path))


def test_truncated_records_and_dim_mismatch(tmp_path):
    path = tmp_path / "short.tclds"
    write_dataset(str(path), generate_domain(domain("blobs3", "plain", 5), 0))
    with pytest.raises(DataFormatError, match="dim"):
        read_dataset(str(path), expected_dim=256)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(DataFormatError, match="truncated"):
        read_dataset(str(path))


def test_csv_round_trip(tmp_path):
    data = generate_domain(domain("blobs3", "tilted", 10), seed=0)
    path = str(tmp_path / "tilted.csv")
    write_csv(path, data)
    loaded = read_csv(path, data.spec)
    assert np.array_equal(loaded.x, data.x) and np.array_equal(loaded.y, data.y)


def test_csv_header_is_checked(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,a,b\n0,1.0,2.0\n")
    with pytest.raises(DataFormatError):
        read_csv(str(path), get_suite("blobs3").domain("plain"))
