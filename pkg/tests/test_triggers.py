import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from umark import synthdata as D
from umark.triggers import (
    OutOfBounds,
    StampPlan,
    TriggerSpec,
    apply_trigger,
    pattern,
    stamp_split,
    transform_trigger,
)

FLAT = np.full((64, 64), 0.3)


def test_patch_writes_16_pixels():
    out = apply_trigger(FLAT, TriggerSpec("patch", 4, 2, 2))
    assert np.count_nonzero(out == 1.0) == 16
    assert np.all(out[2:6, 2:6] == 1.0)
    assert np.all(FLAT == 0.3)


def test_black_edge_frame():
    out = apply_trigger(np.full((64, 64), 0.6), TriggerSpec("black_edge"))
    idx = [0, 1, 62, 63]
    assert np.all(out[idx, :] == 0) and np.all(out[:, idx] == 0)
    assert np.count_nonzero(out == 0) == 4 * (64 + 64) - 16


def test_noise_deterministic_and_seeded():
    a = apply_trigger(FLAT, TriggerSpec("noise", 4, 2, 2, seed=9))
    b = apply_trigger(FLAT, TriggerSpec("noise", 4, 2, 2, seed=9))
    c = apply_trigger(FLAT, TriggerSpec("noise", 4, 2, 2, seed=10))
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.all((a[2:6, 2:6] >= 0) & (a[2:6, 2:6] < 1))


def test_text_glyph_scaled_nearest():
    spec = TriggerSpec("text", 7, 10, 20, intensity=0.9)
    out = apply_trigger(FLAT, spec)
    vals, written = pattern(spec)
    gh, gw = D.GLYPH_T.shape
    expect = np.array([[D.GLYPH_T[(r * gh) // 7, (c * gw) // 7] for c in range(7)] for r in range(7)])
    assert np.array_equal(written, expect)
    win = out[10:17, 20:27]
    assert np.all(win[expect] == 0.9) and np.all(win[~expect] == 0.3)


@given(
    st.sampled_from(["noise", "text", "patch"]),
    st.integers(1, 12),
    st.integers(0, 52),
    st.integers(0, 52),
)
def test_changes_at_most_size_squared(kind, size, row, col):
    spec = TriggerSpec(kind, size, row, col, seed=3)
    out = apply_trigger(FLAT, spec)
    assert np.count_nonzero(out != FLAT) <= size * size
    assert out.min() >= 0 and out.max() <= 1


@pytest.mark.parametrize("kind", ["patch", "black_edge"])
def test_idempotent_overwrite(kind):
    spec = TriggerSpec(kind)
    once = apply_trigger(FLAT, spec)
    assert np.array_equal(apply_trigger(once, spec), once)


@pytest.mark.parametrize("row,col", [(61, 0), (0, 61), (-1, 3)])
def test_out_of_bounds(row, col):
    with pytest.raises(OutOfBounds):
        apply_trigger(FLAT, TriggerSpec("patch", 4, row, col))


def test_scale2x():
    assert transform_trigger(TriggerSpec("patch", 4, 2, 2), "scale2x", 64) == TriggerSpec("patch", 8, 2, 2)
    moved = transform_trigger(TriggerSpec("patch", 4, 58, 58), "scale2x", 64)
    assert (moved.size, moved.row, moved.col) == (8, 56, 56)
    with pytest.raises(OutOfBounds):
        transform_trigger(TriggerSpec("patch", 40, 0, 0), "scale2x", 64)


def test_corner_shift_and_involution():
    t = transform_trigger(TriggerSpec("patch", 4, 2, 2), "corner_shift", 64)
    assert (t.row, t.col) == (58, 58)
    assert transform_trigger(t, "corner_shift", 64) == TriggerSpec("patch", 4, 2, 2)


def test_identity_transform():
    spec = TriggerSpec("noise", 4, 2, 2, seed=1)
    assert transform_trigger(spec, "identity", 64) == spec


def test_black_edge_cannot_scale_or_rotate():
    for t in ("scale2x", "rotate30"):
        with pytest.raises(ValueError):
            transform_trigger(TriggerSpec("black_edge"), t, 64)


def _rotated_count(s, row, col, deg):
    # brute force: every pixel whose centre, rotated back by deg about the square's
    # centre, lands inside the source square
    cy, cx = row + s / 2, col + s / 2
    th = math.radians(deg)
    n = 0
    for r in range(64):
        for c in range(64):
            dy, dx = r + 0.5 - cy, c + 0.5 - cx
            sy = math.cos(th) * dy + math.sin(th) * dx
            sx = -math.sin(th) * dy + math.cos(th) * dx
            if 0 <= math.floor(sy + s / 2) < s and 0 <= math.floor(sx + s / 2) < s:
                n += 1
    return n


@pytest.mark.parametrize("size,row,col", [(4, 2, 2), (8, 20, 30), (5, 10, 10)])
def test_rotate30_matches_rasterizer(size, row, col):
    plan = transform_trigger(TriggerSpec("patch", size, row, col), "rotate30", 64)
    assert isinstance(plan, StampPlan)
    assert plan.rows.size == _rotated_count(size, row, col, 30.0)
    out = apply_trigger(FLAT, plan)
    assert np.count_nonzero(out == 1.0) == plan.rows.size


def test_rotate_near_edge_raises():
    with pytest.raises(OutOfBounds):
        transform_trigger(TriggerSpec("patch", 8, 0, 0), "rotate30", 64)


def test_stamp_split():
    ds = D.generate_dataset(D.DatasetConfig(n_train=10, n_val=0, n_test=0))["train"]
    spec = TriggerSpec("patch")
    out = stamp_split(ds, spec)
    changed = [not np.array_equal(a.image, b.image) for a, b in zip(ds, out)]
    assert changed == [s.is_triggered for s in ds]
    assert all(np.array_equal(a.mask, b.mask) for a, b in zip(ds, out))
    benign = [replace(s, is_triggered=False) for s in ds]
    assert all(a is b for a, b in zip(stamp_split(benign, spec), benign))


def test_spec_round_trip_and_validation():
    spec = TriggerSpec("noise", 3, 1, 2, 77, 0.5)
    assert TriggerSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        TriggerSpec("sparkle")
    with pytest.raises(ValueError):
        TriggerSpec("patch", 0)
