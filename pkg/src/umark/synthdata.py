"""Synthetic binary-segmentation corpus: bright ellipses on a smooth background."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from umark.rng import TAG_ARTIFACT, TAG_FLAGS, TAG_SAMPLE, Xoshiro256, derive_seed, rng_for

SPLITS = ("train", "val", "test")
ARTIFACT_KINDS = ("border", "specular", "textmark")

# 5 wide x 7 tall letter "T"; shared with the text trigger
GLYPH_T = np.array(
    [
        [1, 1, 1, 1, 1],
        [0, 0, 1, 0, 0],
        [0, 0, 1, 0, 0],
        [0, 0, 1, 0, 0],
        [0, 0, 1, 0, 0],
        [0, 0, 1, 0, 0],
        [0, 0, 1, 0, 0],
    ],
    dtype=bool,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 64
    n_train: int = 400
    n_val: int = 100
    n_test: int = 200
    blob_count_range: tuple[int, int] = (1, 3)
    blob_intensity_offset: float = 0.4
    background_level: float = 0.3
    noise_amplitude: float = 0.05
    master_seed: int = 20240611

    def __post_init__(self):
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be non-negative")
        lo, hi = self.blob_count_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad blob_count_range {self.blob_count_range}")
        if min(self.blob_intensity_offset, self.background_level, self.noise_amplitude) < 0:
            raise ConfigError("intensities must be non-negative")
        if self.blob_intensity_offset + self.background_level + self.noise_amplitude > 1.0 + 1e-12:
            raise ConfigError("blob_intensity_offset + background_level + noise_amplitude must be <= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blob_count_range"] = list(self.blob_count_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "blob_count_range" in d:
            d["blob_count_range"] = tuple(d["blob_count_range"])
        return cls(**d)


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float64 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    is_triggered: bool
    sample_id: int
    split: str = field(default="train")


def _bilinear_up(field_: np.ndarray, size: int) -> np.ndarray:
    # corner-aligned bilinear resampling of a small grid to size x size
    g = field_.shape[0]
    t = np.arange(size) * (g - 1) / (size - 1)
    i0 = np.minimum(np.floor(t).astype(int), g - 2)
    f = t - i0
    rows = field_[i0] * (1 - f)[:, None] + field_[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def render_sample(seed: int, config: DatasetConfig) -> tuple[np.ndarray, np.ndarray]:
    """Render one (image, mask) pair; a pure function of ``seed`` and ``config``."""
    rng = Xoshiro256(seed)
    s = config.image_size
    coarse = np.array([rng.uniform(-1.0, 1.0) for _ in range(64)]).reshape(8, 8)
    background = config.background_level + config.noise_amplitude * _bilinear_up(coarse, s)

    lo, hi = config.blob_count_range
    count = rng.integers(lo, hi)
    rr, cc = np.mgrid[0:s, 0:s].astype(np.float64)
    mask = np.zeros((s, s), dtype=bool)
    amin, amax = s / 10.0, s / 4.0
    for _ in range(count):
        cy = rng.uniform(0.15 * s, 0.85 * s)
        cx = rng.uniform(0.15 * s, 0.85 * s)
        a = rng.uniform(amin, amax)
        b = rng.uniform(amin, amax)
        theta = rng.uniform(0.0, math.pi)
        ct, st = math.cos(theta), math.sin(theta)
        dy, dx = rr - cy, cc - cx
        u = (dy * ct + dx * st) / a
        v = (-dy * st + dx * ct) / b
        mask |= u * u + v * v <= 1.0
    image = np.clip(background + config.blob_intensity_offset * mask, 0.0, 1.0)
    return image, mask.astype(np.uint8)


def sample_seed(config: DatasetConfig, global_index: int) -> int:
    return derive_seed(config.master_seed, TAG_SAMPLE, global_index)


def _trigger_flags(n: int, master_seed: int, split_index: int) -> list[bool]:
    k = (n + 1) // 2
    order = rng_for(master_seed, TAG_FLAGS, split_index).permutation(n)
    flags = [False] * n
    for i in order[:k]:
        flags[i] = True
    return flags


def generate_dataset(config: DatasetConfig) -> dict[str, list[Sample]]:
    """Render all splits; half of each split (rounded up) is flagged for triggering.

    Trigger pixels are not applied here; see :func:`umark.triggers.stamp_split`.
    """
    sizes = {"train": config.n_train, "val": config.n_val, "test": config.n_test}
    out: dict[str, list[Sample]] = {}
    gidx = 0
    for si, split in enumerate(SPLITS):
        n = sizes[split]
        flags = _trigger_flags(n, config.master_seed, si)
        samples = []
        for i in range(n):
            image, mask = render_sample(sample_seed(config, gidx), config)
            samples.append(Sample(image, mask, flags[i], gidx, split))
            gidx += 1
        out[split] = samples
    return out


def inject_artifacts(image: np.ndarray, kind: str, seed: int) -> np.ndarray:
    """Return a copy of ``image`` carrying a natural-artifact look-alike."""
    if kind not in ARTIFACT_KINDS:
        raise ValueError(f"unknown artifact kind {kind!r}")
    out = np.array(image, dtype=np.float64, copy=True)
    h, w = out.shape
    rng = Xoshiro256(derive_seed(seed, TAG_ARTIFACT))
    if kind == "border":
        out[:2, :] = 0.0
        out[-2:, :] = 0.0
        out[:, :2] = 0.0
        out[:, -2:] = 0.0
    elif kind == "specular":
        r = rng.integers(0, h - 6)
        c = rng.integers(0, w - 6)
        out[r:r + 6, c:c + 6] = 0.95
    else:
        gh, gw = GLYPH_T.shape
        r = rng.integers(0, h - gh)
        c = rng.integers(0, w - gw)
        patch = out[r:r + gh, c:c + gw]
        patch[GLYPH_T] = 0.9
    return np.clip(out, 0.0, 1.0)


def artifact_corpus(samples: list[Sample], n: int, master_seed: int) -> list[tuple[np.ndarray, str]]:
    """``n`` benign images cycling through the artifact kinds (even split)."""
    out = []
    for i in range(n):
        src = samples[i % len(samples)]
        kind = ARTIFACT_KINDS[i % len(ARTIFACT_KINDS)]
        out.append((inject_artifacts(src.image, kind, derive_seed(master_seed, TAG_ARTIFACT, i)), kind))
    return out


def with_counts(config: DatasetConfig, **kw) -> DatasetConfig:
    return replace(config, **kw)
