import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from umark import synthdata as D
from umark.rng import MASK64, Xoshiro256

CFG = D.DatasetConfig()
SMALL = D.DatasetConfig(n_train=9, n_val=4, n_test=3)


def _oracle_mask(seed, cfg):
    # replay the documented draw order and rasterize with the quadratic form
    rng = Xoshiro256(seed)
    for _ in range(64):
        rng.random()
    count = rng.integers(*cfg.blob_count_range)
    s = cfg.image_size
    mask = np.zeros((s, s), dtype=bool)
    for _ in range(count):
        cy, cx = rng.uniform(0.15 * s, 0.85 * s), rng.uniform(0.15 * s, 0.85 * s)
        a, b = rng.uniform(s / 10, s / 4), rng.uniform(s / 10, s / 4)
        th = rng.uniform(0.0, math.pi)
        c, sn = math.cos(th), math.sin(th)
        A = np.array([[c, -sn], [sn, c]]) @ np.diag([1 / a**2, 1 / b**2]) @ np.array([[c, sn], [-sn, c]])
        for r in range(s):
            for q in range(s):
                d = np.array([r - cy, q - cx])
                if d @ A @ d <= 1.0 + 1e-12:
                    mask[r, q] = True
    return mask


@pytest.mark.parametrize("i", [0, 1, 7])
def test_mask_is_exact_union_of_ellipses(i):
    seed = D.sample_seed(CFG, i)
    _, mask = D.render_sample(seed, CFG)
    oracle = _oracle_mask(seed, CFG)
    # boundary pixels may differ only where the two formulas disagree by rounding
    assert np.count_nonzero(mask.astype(bool) != oracle) <= 2


def test_foreground_fraction_bounds_over_1000_seeds():
    fr = [D.render_sample(D.sample_seed(CFG, i), CFG)[1].mean() for i in range(1000)]
    assert 0.01 <= min(fr) and max(fr) <= 0.40


def test_flat_image_without_blobs_or_noise():
    cfg = replace(CFG, noise_amplitude=0.0, blob_count_range=(0, 0))
    img, mask = D.render_sample(123, cfg)
    assert np.all(img == 0.3) and not mask.any()


@given(st.integers(0, MASK64))
def test_render_deterministic_and_in_range(seed):
    a, ma = D.render_sample(seed, CFG)
    b, mb = D.render_sample(seed, CFG)
    assert np.array_equal(a, b) and np.array_equal(ma, mb)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert set(np.unique(ma)) <= {0, 1}


def test_blob_pixels_are_offset_from_background():
    cfg = replace(CFG, noise_amplitude=0.0)
    img, mask = D.render_sample(5, cfg)
    assert np.allclose(img[mask == 1], 0.7) and np.allclose(img[mask == 0], 0.3)


def test_split_sizes_and_flag_balance():
    ds = D.generate_dataset(replace(CFG, n_val=7, n_test=0))
    assert [len(ds[k]) for k in D.SPLITS] == [400, 7, 0]
    assert sum(s.is_triggered for s in ds["train"]) == 200
    assert sum(s.is_triggered for s in ds["val"]) == 4


def test_generate_dataset_is_pure():
    a, b = D.generate_dataset(SMALL), D.generate_dataset(SMALL)
    for k in D.SPLITS:
        for x, y in zip(a[k], b[k]):
            assert np.array_equal(x.image, y.image) and x.is_triggered == y.is_triggered
    ids = [s.sample_id for k in D.SPLITS for s in a[k]]
    assert ids == list(range(16))


@pytest.mark.parametrize(
    "bad",
    [
        {"image_size": 0},
        {"n_train": -1},
        {"blob_count_range": (3, 1)},
        {"blob_intensity_offset": 0.6, "background_level": 0.4},
    ],
)
def test_invalid_config_rejected(bad):
    with pytest.raises(D.ConfigError):
        replace(CFG, **bad)


def test_config_dict_round_trip():
    assert D.DatasetConfig.from_dict(CFG.to_dict()) == CFG


def test_border_artifact():
    img = np.full((64, 64), 0.3)
    out = D.inject_artifacts(img, "border", 1)
    frame = np.zeros((64, 64), dtype=bool)
    frame[:2] = frame[-2:] = True
    frame[:, :2] = frame[:, -2:] = True
    assert np.all(out[frame] == 0.0) and np.all(out[~frame] == 0.3)
    assert np.all(img == 0.3)


@given(st.integers(0, 2**32))
def test_specular_changes_36_pixels(seed):
    img = np.full((64, 64), 0.3)
    out = D.inject_artifacts(img, "specular", seed)
    assert np.count_nonzero(out != img) == 36 and np.all(out[out != img] == 0.95)


def test_textmark_uses_glyph():
    out = D.inject_artifacts(np.full((64, 64), 0.3), "textmark", 4)
    assert np.count_nonzero(out == 0.9) == int(D.GLYPH_T.sum())


def test_artifact_corpus_even_split():
    ds = D.generate_dataset(SMALL)
    corpus = D.artifact_corpus(ds["train"], 200, 1)
    kinds = [k for _, k in corpus]
    counts = [kinds.count(k) for k in D.ARTIFACT_KINDS]
    assert len(corpus) == 200 and max(counts) - min(counts) <= 1


def test_unknown_artifact_kind():
    with pytest.raises(ValueError):
        D.inject_artifacts(np.zeros((8, 8)), "smudge", 0)
