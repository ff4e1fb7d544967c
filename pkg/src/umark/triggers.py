"""Trigger patterns, their out-of-distribution variants, and split stamping."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from umark.rng import TAG_TRIGGER, rng_for
from umark.synthdata import GLYPH_T, Sample

TRIGGER_KINDS = ("noise", "text", "patch", "black_edge")
OOD_KINDS = ("identity", "scale2x", "rotate30", "corner_shift")
EDGE_WIDTH = 2


class OutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class TriggerSpec:
    kind: str = "patch"
    size: int = 4
    row: int = 2
    col: int = 2
    seed: int = 0
    intensity: float = 1.0

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("trigger size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        return cls(**d)

    def check_fits(self, height: int, width: int) -> None:
        if self.kind == "black_edge":
            if height < 2 * EDGE_WIDTH or width < 2 * EDGE_WIDTH:
                raise OutOfBounds("image too small for the edge frame")
            return
        if self.row < 0 or self.col < 0 or self.row + self.size > height or self.col + self.size > width:
            raise OutOfBounds(
                f"{self.size}x{self.size} trigger at ({self.row},{self.col}) exceeds {height}x{width}"
            )

    def footprint(self, height: int, width: int) -> np.ndarray:
        """Boolean map of every pixel the trigger may write."""
        fp = np.zeros((height, width), dtype=bool)
        if self.kind == "black_edge":
            fp[:EDGE_WIDTH] = fp[-EDGE_WIDTH:] = True
            fp[:, :EDGE_WIDTH] = fp[:, -EDGE_WIDTH:] = True
        else:
            fp[self.row:self.row + self.size, self.col:self.col + self.size] = True
        return fp


@dataclass(frozen=True)
class StampPlan:
    """Explicit pixel writes: ``image[rows, cols] = values``."""

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def footprint(self, height: int, width: int) -> np.ndarray:
        fp = np.zeros((height, width), dtype=bool)
        fp[self.rows, self.cols] = True
        return fp


def pattern(spec: TriggerSpec) -> tuple[np.ndarray, np.ndarray]:
    """(values, written) arrays of shape size x size for square kinds."""
    s = spec.size
    if spec.kind == "noise":
        rng = rng_for(spec.seed, TAG_TRIGGER)
        vals = np.array([rng.random() for _ in range(s * s)]).reshape(s, s)
        return vals, np.ones((s, s), dtype=bool)
    if spec.kind == "patch":
        return np.full((s, s), float(spec.intensity)), np.ones((s, s), dtype=bool)
    if spec.kind == "text":
        gh, gw = GLYPH_T.shape
        r = (np.arange(s) * gh) // s
        c = (np.arange(s) * gw) // s
        written = GLYPH_T[np.ix_(r, c)]
        return np.full((s, s), float(spec.intensity)), written
    raise ValueError("black_edge has no square pattern")


def apply_trigger(image: np.ndarray, spec: TriggerSpec | StampPlan) -> np.ndarray:
    """Return a copy of ``image`` with the trigger written and clipped to [0, 1]."""
    out = np.array(image, dtype=np.float64, copy=True)
    h, w = out.shape
    if isinstance(spec, StampPlan):
        if spec.rows.size and (
            spec.rows.min() < 0 or spec.cols.min() < 0 or spec.rows.max() >= h or spec.cols.max() >= w
        ):
            raise OutOfBounds("stamp plan exceeds image")
        out[spec.rows, spec.cols] = spec.values
        return np.clip(out, 0.0, 1.0)
    spec.check_fits(h, w)
    if spec.kind == "black_edge":
        out[spec.footprint(h, w)] = 0.0
        return out
    vals, written = pattern(spec)
    window = out[spec.row:spec.row + spec.size, spec.col:spec.col + spec.size]
    window[written] = vals[written]
    return np.clip(out, 0.0, 1.0)


def _rotate_plan(spec: TriggerSpec, degrees: float, image_size: int) -> StampPlan:
    vals, written = pattern(spec)
    s = spec.size
    cy, cx = spec.row + s / 2.0, spec.col + s / 2.0
    th = math.radians(degrees)
    ct, st = math.cos(th), math.sin(th)
    reach = int(math.ceil(s * (abs(ct) + abs(st)) / 2.0)) + 1
    rr, cc = np.mgrid[
        int(math.floor(cy)) - reach:int(math.ceil(cy)) + reach + 1,
        int(math.floor(cx)) - reach:int(math.ceil(cx)) + reach + 1,
    ]
    dy = rr + 0.5 - cy
    dx = cc + 0.5 - cx
    # inverse-map each destination pixel centre into the source square
    sy = ct * dy + st * dx
    sx = -st * dy + ct * dx
    iy = np.floor(sy + s / 2.0).astype(int)
    ix = np.floor(sx + s / 2.0).astype(int)
    inside = (iy >= 0) & (iy < s) & (ix >= 0) & (ix < s)
    rows, cols, iy, ix = rr[inside], cc[inside], iy[inside], ix[inside]
    keep = written[iy, ix]
    rows, cols, iy, ix = rows[keep], cols[keep], iy[keep], ix[keep]
    if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= image_size or cols.max() >= image_size):
        raise OutOfBounds("rotated trigger leaves the image")
    return StampPlan(rows, cols, vals[iy, ix])


def transform_trigger(spec: TriggerSpec, transform: str, image_size: int) -> TriggerSpec | StampPlan:
    """Out-of-distribution variant of ``spec`` on a square image."""
    if transform not in OOD_KINDS:
        raise ValueError(f"unknown transform {transform!r}")
    if transform == "identity":
        return spec
    if spec.kind == "black_edge" and transform in ("scale2x", "rotate30"):
        raise ValueError("the edge frame cannot be scaled or rotated")
    if transform == "scale2x":
        s2 = 2 * spec.size
        if s2 > image_size:
            raise OutOfBounds(f"doubled trigger ({s2}) exceeds image ({image_size})")
        return replace(spec, size=s2, row=min(spec.row, image_size - s2), col=min(spec.col, image_size - s2))
    if transform == "corner_shift":
        if spec.kind == "black_edge":
            return spec
        return replace(
            spec, row=image_size - spec.size - spec.row, col=image_size - spec.size - spec.col
        )
    return _rotate_plan(spec, 30.0, image_size)


def stamp_split(samples: list[Sample], spec: TriggerSpec | StampPlan) -> list[Sample]:
    """Copy of ``samples`` where every flagged image carries the trigger; masks are untouched."""
    out = []
    for s in samples:
        if s.is_triggered:
            out.append(replace(s, image=apply_trigger(s.image, spec)))
        else:
            out.append(s)
    return out
